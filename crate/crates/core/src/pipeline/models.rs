//! Trained models behind one interface: filtered states for control, a
//! latent transition for exploration, and multi-step frame prediction.

use numkit::{Bound, Checkpoint, Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::detentsim::{Policy, SimState};
use crate::elbo::{draw_noise, train, ElboConfig, EpochStats, TrainReport};
use crate::error::{check_dim, Error, Result};
use crate::genmodel::{GaussianDiag, GaussianNode, GenConfig, GenerativeModel, LatentState};
use crate::qcontrol::{build_dgt, greedy, train_q, QConfig, QNetwork, QReport};
use crate::recognition::{sample, PosteriorEncoder, PosteriorTracker, RecConfig, RecognitionNet};
use crate::sequence::{Decision, HapticSequence, Phase};

use super::rnn::{train_rnn, RnnConfig, RnnPredictor, RnnState, RnnTrainConfig};
use super::window::{WindowConfig, WindowEncoder};

/// Posterior encoder of a latent model.
#[derive(Clone, Debug)]
pub enum Encoder {
    Recurrent(RecognitionNet<f64>),
    Window(WindowEncoder<f64>),
}

impl PosteriorEncoder<f64> for Encoder {
    fn latent_dim(&self) -> usize {
        match self {
            Encoder::Recurrent(e) => e.latent_dim(),
            Encoder::Window(e) => e.latent_dim(),
        }
    }

    fn params(&self) -> &ParamStore<f64> {
        match self {
            Encoder::Recurrent(e) => &e.params,
            Encoder::Window(e) => &e.params,
        }
    }

    fn params_mut(&mut self) -> &mut ParamStore<f64> {
        match self {
            Encoder::Recurrent(e) => &mut e.params,
            Encoder::Window(e) => &mut e.params,
        }
    }

    fn encode_nodes(
        &self,
        g: &mut Graph<f64>,
        p: &Bound<'_, f64>,
        obs: &[Vec<f64>],
        actions: &[Vec<f64>],
    ) -> Result<GaussianNode> {
        match self {
            Encoder::Recurrent(e) => e.encode_nodes(g, p, obs, actions),
            Encoder::Window(e) => e.encode_nodes(g, p, obs, actions),
        }
    }

    fn tracker(&self) -> Box<dyn PosteriorTracker<f64> + '_> {
        match self {
            Encoder::Recurrent(e) => e.tracker(),
            Encoder::Window(e) => e.tracker(),
        }
    }
}

/// Generative model plus its posterior encoder.
#[derive(Clone, Debug)]
pub struct LatentModel {
    pub gen: GenerativeModel<f64>,
    pub encoder: Encoder,
}

impl LatentModel {
    /// Transition means for rows of states and next-step phase vectors.
    pub fn transition_means(&self, states: &[Vec<f64>], actions: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        check_dim("transition batch", states.len(), actions.len())?;
        if states.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let p = g.bind(&self.gen.params);
        let s = g.constant(Tensor::from_rows(states)?);
        let a = g.constant(Tensor::from_rows(actions)?);
        let next = self.gen.transition_node(&mut g, &p, s, a)?;
        Ok(rows_of(g.value(next.mean)))
    }

    pub fn observation_means(&self, states: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if states.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let p = g.bind(&self.gen.params);
        let s = g.constant(Tensor::from_rows(states)?);
        let obs = self.gen.observation_node(&mut g, &p, s)?;
        Ok(rows_of(g.value(obs.mean)))
    }

    pub fn posteriors(&self, seq: &HapticSequence) -> Result<Vec<GaussianDiag<f64>>> {
        self.encoder.encode(&seq.observations, &seq.actions)
    }
}

fn rows_of(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    t.data().chunks(t.cols()).map(|r| r.to_vec()).collect()
}

/// Which model family a checkpoint holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    /// Recurrent encoder with the latent state-space model.
    Full,
    /// Sliding-window encoder with the latent state-space model.
    Window,
    /// Direct recurrent frame predictor.
    Rnn,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Full => "full",
            ModelKind::Window => "window",
            ModelKind::Rnn => "rnn",
        }
    }

    pub fn parse(s: &str) -> Result<ModelKind> {
        match s {
            "full" => Ok(ModelKind::Full),
            "window" => Ok(ModelKind::Window),
            "rnn" => Ok(ModelKind::Rnn),
            other => Err(Error::Config(format!("unknown model kind '{other}' (expected full, window or rnn)"))),
        }
    }
}

#[derive(Clone, Debug)]
pub enum TrainedModel {
    Latent(LatentModel),
    Rnn(RnnPredictor),
}

/// Streams `(o_t, a_t)` and returns the state used by the controller.
pub trait StateTracker {
    fn step(&mut self, obs: &[f64], action: &[f64]) -> Result<Vec<f64>>;
}

struct LatentTracker<'a>(Box<dyn PosteriorTracker<f64> + 'a>);

impl StateTracker for LatentTracker<'_> {
    fn step(&mut self, obs: &[f64], action: &[f64]) -> Result<Vec<f64>> {
        Ok(self.0.step(obs, action)?.mean().to_vec())
    }
}

struct RnnTracker<'a> {
    net: &'a RnnPredictor,
    state: RnnState,
}

impl StateTracker for RnnTracker<'_> {
    fn step(&mut self, obs: &[f64], action: &[f64]) -> Result<Vec<f64>> {
        self.state = self.net.advance(&self.state, obs, action)?;
        Ok(self.state.concat())
    }
}

impl TrainedModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            TrainedModel::Latent(m) => match m.encoder {
                Encoder::Recurrent(_) => ModelKind::Full,
                Encoder::Window(_) => ModelKind::Window,
            },
            TrainedModel::Rnn(_) => ModelKind::Rnn,
        }
    }

    /// Dimension of the controller state: the latent size, or `2 × hidden`
    /// for the recurrent predictor (`[h | c]`).
    pub fn state_dim(&self) -> usize {
        match self {
            TrainedModel::Latent(m) => m.gen.latent_dim(),
            TrainedModel::Rnn(r) => 2 * r.config.hidden,
        }
    }

    /// Filtered controller state for every step of a recorded sequence
    /// (posterior means for latent models).
    pub fn states(&self, seq: &HapticSequence) -> Result<Vec<Vec<f64>>> {
        match self {
            TrainedModel::Latent(m) => Ok(m.posteriors(seq)?.iter().map(|q| q.mean().to_vec()).collect()),
            TrainedModel::Rnn(r) => Ok(r
                .states(&seq.observations, &seq.actions)?
                .iter()
                .map(RnnState::concat)
                .collect()),
        }
    }

    /// Reparameterized posterior samples for latent models; the
    /// deterministic states otherwise.
    pub fn sampled_states<R: Rng + ?Sized>(&self, seq: &HapticSequence, rng: &mut R) -> Result<Vec<Vec<f64>>> {
        match self {
            TrainedModel::Latent(m) => {
                let post = m.posteriors(seq)?;
                let noise = draw_noise::<f64, _>(rng, 1, seq.len(), m.gen.latent_dim()).remove(0);
                Ok(sample(&post, &noise)?.into_iter().map(LatentState::into_values).collect())
            }
            TrainedModel::Rnn(_) => self.states(seq),
        }
    }

    pub fn tracker(&self) -> Box<dyn StateTracker + '_> {
        match self {
            TrainedModel::Latent(m) => Box::new(LatentTracker(m.encoder.tracker())),
            TrainedModel::Rnn(r) => Box::new(RnnTracker {
                net: r,
                state: r.initial_state(),
            }),
        }
    }

    /// Noise-free one-step state prediction under the next phase vectors.
    pub fn transition(&self, states: &[Vec<f64>], actions: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        match self {
            TrainedModel::Latent(m) => m.transition_means(states, actions),
            TrainedModel::Rnn(r) => {
                check_dim("transition batch", states.len(), actions.len())?;
                states
                    .iter()
                    .zip(actions)
                    .map(|(s, a)| Ok(r.transition(&RnnState::split(s, r.config.hidden)?, a)?.concat()))
                    .collect()
            }
        }
    }

    /// For every `t` in `0..T - horizon`, the predicted frames
    /// `t + 1 ..= t + horizon` given the prefix `0..=t` and the recorded
    /// future phase vectors.
    pub fn predict(&self, seq: &HapticSequence, horizon: usize) -> Result<Vec<Vec<Vec<f64>>>> {
        let n = seq.len().saturating_sub(horizon);
        match self {
            TrainedModel::Latent(m) => {
                let post = m.posteriors(seq)?;
                let mut states: Vec<Vec<f64>> = post[..n].iter().map(|q| q.mean().to_vec()).collect();
                let mut out = vec![Vec::with_capacity(horizon); n];
                for k in 1..=horizon {
                    let actions: Vec<Vec<f64>> = (0..n).map(|t| seq.actions[t + k].clone()).collect();
                    states = m.transition_means(&states, &actions)?;
                    for (t, frame) in m.observation_means(&states)?.into_iter().enumerate() {
                        out[t].push(frame);
                    }
                }
                Ok(out)
            }
            TrainedModel::Rnn(r) => {
                let states = r.states(&seq.observations, &seq.actions)?;
                (0..n)
                    .map(|t| r.predict_from(&states[t], &seq.actions[t + 1..=t + horizon]))
                    .collect()
            }
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        ckpt.set_meta("model.kind", self.kind().name());
        match self {
            TrainedModel::Latent(m) => {
                m.gen.to_checkpoint(&mut ckpt);
                match &m.encoder {
                    Encoder::Recurrent(e) => e.to_checkpoint(&mut ckpt),
                    Encoder::Window(e) => e.to_checkpoint(&mut ckpt),
                }
            }
            TrainedModel::Rnn(r) => r.to_checkpoint(&mut ckpt),
        }
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<TrainedModel> {
        let kind = ModelKind::parse(&ckpt.meta_parse::<String>("model.kind")?)?;
        Ok(match kind {
            ModelKind::Full => TrainedModel::Latent(LatentModel {
                gen: GenerativeModel::from_checkpoint(ckpt)?,
                encoder: Encoder::Recurrent(RecognitionNet::from_checkpoint(ckpt)?),
            }),
            ModelKind::Window => TrainedModel::Latent(LatentModel {
                gen: GenerativeModel::from_checkpoint(ckpt)?,
                encoder: Encoder::Window(WindowEncoder::from_checkpoint(ckpt)?),
            }),
            ModelKind::Rnn => TrainedModel::Rnn(RnnPredictor::from_checkpoint(ckpt)?),
        })
    }
}

/// Architecture and optimization settings for every model family.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub latent_dim: usize,
    pub hidden: usize,
    pub window: usize,
    pub elbo: ElboConfig,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            kind: ModelKind::Full,
            latent_dim: 16,
            hidden: 64,
            window: 5,
            elbo: ElboConfig::default(),
        }
    }
}

/// What training produced besides the model.
#[derive(Clone, Debug, PartialEq)]
pub enum TrainLog {
    Elbo(TrainReport),
    /// Mean one-step squared error per epoch.
    Rnn(Vec<f64>),
    /// Sequences shorter than the encoder window, left out of training.
    Skipped(usize, TrainReport),
}

/// Trains the requested model family; `on_epoch` sees latent-model epochs.
pub fn train_model(
    dataset: &[HapticSequence],
    spec: &ModelSpec,
    mut on_epoch: impl FnMut(&EpochStats) -> Result<()>,
) -> Result<(TrainedModel, TrainLog)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.elbo.seed);
    let gen_config = GenConfig {
        latent_dim: spec.latent_dim,
        hidden: spec.hidden,
        ..GenConfig::default()
    };
    match spec.kind {
        ModelKind::Full => {
            let mut gen = GenerativeModel::new(gen_config, &mut rng)?;
            let rec = RecConfig {
                hidden1: spec.hidden,
                hidden2: spec.hidden,
                latent_dim: spec.latent_dim,
                ..RecConfig::default()
            };
            let mut enc = Encoder::Recurrent(RecognitionNet::new(rec, &mut rng)?);
            let report = train(dataset, &mut gen, &mut enc, &spec.elbo, |s, _, _| on_epoch(s))?;
            Ok((TrainedModel::Latent(LatentModel { gen, encoder: enc }), TrainLog::Elbo(report)))
        }
        ModelKind::Window => {
            let mut gen = GenerativeModel::new(gen_config, &mut rng)?;
            let wc = WindowConfig {
                window: spec.window,
                hidden: spec.hidden,
                latent_dim: spec.latent_dim,
                ..WindowConfig::default()
            };
            let window = WindowEncoder::new(wc, &mut rng)?;
            let usable: Vec<HapticSequence> = dataset.iter().filter(|s| window.accepts(s.len())).cloned().collect();
            let skipped = dataset.len() - usable.len();
            let mut enc = Encoder::Window(window);
            let report = train(&usable, &mut gen, &mut enc, &spec.elbo, |s, _, _| on_epoch(s))?;
            Ok((TrainedModel::Latent(LatentModel { gen, encoder: enc }), TrainLog::Skipped(skipped, report)))
        }
        ModelKind::Rnn => {
            let mut net = RnnPredictor::new(
                RnnConfig {
                    hidden: spec.hidden,
                    ..RnnConfig::default()
                },
                &mut rng,
            )?;
            let tc = RnnTrainConfig {
                epochs: spec.elbo.epochs,
                minibatch: spec.elbo.minibatch,
                seed: spec.elbo.seed,
                clip_norm: spec.elbo.clip_norm,
                rho: spec.elbo.rho,
                epsilon: spec.elbo.epsilon,
            };
            let history = train_rnn(dataset, &mut net, &tc)?;
            Ok((TrainedModel::Rnn(net), TrainLog::Rnn(history)))
        }
    }
}

/// Offline Q-learning on controller states of `model`, exploring with its
/// transition. Latent states are posterior samples drawn once with noise
/// seeded from `config.seed`.
pub fn train_controller(model: &TrainedModel, dataset: &[HapticSequence], config: &QConfig) -> Result<(QNetwork<f64>, QReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_da7a);
    let dgt = build_dgt(dataset, |s: &HapticSequence| model.sampled_states(s, &mut rng))?;
    let transition = |s: &[Vec<f64>], a: &[Vec<f64>]| model.transition(s, a);
    train_q(&dgt, &transition, config)
}

/// Closed-loop controller: filtered state from the model, greedy decision
/// from the Q-network.
pub struct LearnedPolicy<'a> {
    model: &'a TrainedModel,
    q: &'a QNetwork<f64>,
    tracker: Box<dyn StateTracker + 'a>,
}

impl<'a> LearnedPolicy<'a> {
    pub fn new(model: &'a TrainedModel, q: &'a QNetwork<f64>) -> Result<Self> {
        check_dim("q-network state", model.state_dim(), q.state_dim)?;
        Ok(Self {
            model,
            q,
            tracker: model.tracker(),
        })
    }
}

impl Policy for LearnedPolicy<'_> {
    fn reset(&mut self) -> Result<()> {
        self.tracker = self.model.tracker();
        Ok(())
    }

    fn decide(&mut self, observation: &[f64], phase: Phase, _state: &SimState) -> Result<Decision> {
        let s = self.tracker.step(observation, &phase.one_hot())?;
        let values = self.q.values(&s)?;
        Ok(Decision::from_index(greedy(&values)).expect("two decisions"))
    }
}
