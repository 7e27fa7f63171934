//! Run configuration file. Every section is optional; command-line flags win
//! over file values, which win over the built-in defaults.

use std::path::Path;

use anyhow::Context;
use haptiq_core::detentsim::KnobConfig;
use haptiq_core::elbo::ElboConfig;
use haptiq_core::pipeline::{ModelKind, ModelSpec};
use haptiq_core::qcontrol::QConfig;
use serde::Deserialize;

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Full scenario, in the same keys a scenario file uses.
    pub scenario: Option<KnobConfig>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub q: QSection,
    #[serde(default)]
    pub eval: EvalSection,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: Option<String>,
    pub latent_dim: Option<usize>,
    pub hidden: Option<usize>,
    pub window: Option<usize>,
    pub epochs: Option<usize>,
    pub minibatch: Option<usize>,
    pub samples: Option<usize>,
    pub kl_anneal_epochs: Option<usize>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QSection {
    pub iterations: Option<usize>,
    pub hidden: Option<usize>,
    pub minibatch: Option<usize>,
    pub gamma: Option<f64>,
    pub epsilon_start: Option<f64>,
    pub epsilon_end: Option<f64>,
    pub explore: Option<bool>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub horizons: Option<Vec<usize>>,
    pub episodes: Option<usize>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<RunConfig> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let config: RunConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if let Some(s) = &config.scenario {
            s.validate()?;
        }
        Ok(config)
    }

    /// Named preset if given, else the file's scenario, else the stirrer.
    pub fn scenario(&self, preset: Option<&str>) -> anyhow::Result<KnobConfig> {
        Ok(match (preset, &self.scenario) {
            (Some(name), _) => KnobConfig::preset(name)?,
            (None, Some(s)) => s.clone(),
            (None, None) => KnobConfig::preset("stirrer")?,
        })
    }

    pub fn model_spec(&self, kind: Option<&str>, epochs: Option<usize>, seed: u64) -> anyhow::Result<ModelSpec> {
        let m = &self.model;
        let base = ModelSpec::default();
        let kind = match kind.or(m.kind.as_deref()) {
            Some(k) => ModelKind::parse(k)?,
            None => base.kind,
        };
        let elbo = ElboConfig {
            epochs: epochs.or(m.epochs).unwrap_or(base.elbo.epochs),
            minibatch: m.minibatch.unwrap_or(base.elbo.minibatch),
            samples: m.samples.unwrap_or(base.elbo.samples),
            kl_anneal_epochs: m.kl_anneal_epochs.unwrap_or(base.elbo.kl_anneal_epochs),
            seed,
            ..base.elbo
        };
        elbo.validate()?;
        Ok(ModelSpec {
            kind,
            latent_dim: m.latent_dim.unwrap_or(base.latent_dim),
            hidden: m.hidden.unwrap_or(base.hidden),
            window: m.window.unwrap_or(base.window),
            elbo,
        })
    }

    pub fn q_config(&self, iterations: Option<usize>, no_explore: bool, seed: u64) -> anyhow::Result<QConfig> {
        let q = &self.q;
        let base = QConfig::default();
        let config = QConfig {
            iterations: iterations.or(q.iterations).unwrap_or(base.iterations),
            hidden: q.hidden.unwrap_or(base.hidden),
            minibatch: q.minibatch.unwrap_or(base.minibatch),
            gamma: q.gamma.unwrap_or(base.gamma),
            epsilon_start: q.epsilon_start.unwrap_or(base.epsilon_start),
            epsilon_end: q.epsilon_end.unwrap_or(base.epsilon_end),
            explore: !no_explore && q.explore.unwrap_or(base.explore),
            seed,
            ..base
        };
        config.validate()?;
        Ok(config)
    }
}
