//! Prediction and control evaluation, plus latent-state export.

use crate::detentsim::{rollout_policy, KnobConfig, RolloutReport};
use crate::error::{invalid, Result};
use crate::qcontrol::QNetwork;
use crate::sequence::{HapticSequence, Phase};

use super::models::{LearnedPolicy, TrainedModel};

/// Multi-step frame prediction from a sequence prefix.
pub trait FramePredictor {
    /// Entry `[t][k - 1]` predicts frame `t + k` from the prefix `0..=t`, for
    /// `t` in `0..T - horizon` and `k` in `1..=horizon`.
    fn predict(&self, seq: &HapticSequence, horizon: usize) -> Result<Vec<Vec<Vec<f64>>>>;
}

impl FramePredictor for TrainedModel {
    fn predict(&self, seq: &HapticSequence, horizon: usize) -> Result<Vec<Vec<Vec<f64>>>> {
        TrainedModel::predict(self, seq, horizon)
    }
}

/// Chance reference: always predicts an all-zero frame.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroPredictor;

impl FramePredictor for ZeroPredictor {
    fn predict(&self, seq: &HapticSequence, horizon: usize) -> Result<Vec<Vec<Vec<f64>>>> {
        let width = seq.observations[0].len();
        Ok(vec![vec![vec![0.0; width]; horizon]; seq.len().saturating_sub(horizon)])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HorizonError {
    pub horizon: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub count: usize,
}

/// Average L2 error over every evaluable step of every sequence. All
/// horizons use the same steps `t < T - max(horizons)`; frames past the end
/// are never padded.
pub fn eval_prediction(
    predictor: &dyn FramePredictor,
    dataset: &[HapticSequence],
    horizons: &[usize],
) -> Result<Vec<HorizonError>> {
    let max_h = *horizons.iter().max().ok_or_else(|| invalid("no horizons"))?;
    if horizons.contains(&0) {
        return Err(invalid("horizons must be positive"));
    }
    let mut errors: Vec<Vec<f64>> = vec![Vec::new(); horizons.len()];
    for seq in dataset {
        if seq.len() <= max_h {
            return Err(invalid(format!("sequence {} has {} steps, horizon {max_h} needs more", seq.id, seq.len())));
        }
        let pred = predictor.predict(seq, max_h)?;
        for (t, frames) in pred.iter().enumerate() {
            for (i, &h) in horizons.iter().enumerate() {
                let target = &seq.observations[t + h];
                let d2: f64 = frames[h - 1].iter().zip(target).map(|(p, o)| (p - o) * (p - o)).sum();
                errors[i].push(d2.sqrt());
            }
        }
    }
    Ok(horizons
        .iter()
        .zip(errors)
        .map(|(&horizon, e)| {
            let n = e.len() as f64;
            let mean = if e.is_empty() { 0.0 } else { e.iter().sum::<f64>() / n };
            let var = if e.is_empty() { 0.0 } else { e.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n };
            HorizonError {
                horizon,
                mean,
                std: var.sqrt(),
                count: e.len(),
            }
        })
        .collect())
}

/// Seconds of look-ahead per prediction step.
pub const SECONDS_PER_STEP: f64 = 0.05;

/// One row per horizon: model and chance errors side by side.
pub fn prediction_csv(model: &[HorizonError], chance: &[HorizonError]) -> String {
    let mut out = String::from("horizon,seconds,mean_l2,std_l2,chance_mean_l2,chance_std_l2,count\n");
    for (m, c) in model.iter().zip(chance) {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            m.horizon,
            m.horizon as f64 * SECONDS_PER_STEP,
            m.mean,
            m.std,
            c.mean,
            c.std,
            m.count
        ));
    }
    out
}

/// Closed-loop episodes of the learned controller on a scenario.
pub fn eval_task(
    model: &TrainedModel,
    q: &QNetwork<f64>,
    scenario: &KnobConfig,
    n_episodes: usize,
    seed: u64,
) -> Result<RolloutReport> {
    let mut policy = LearnedPolicy::new(model, q)?;
    rollout_policy(&mut policy, scenario, n_episodes, seed)
}

/// Filtered controller state of every step, one CSV row per step.
pub fn embeddings_csv(model: &TrainedModel, dataset: &[HapticSequence]) -> Result<String> {
    let dim = model.state_dim();
    let mut out = String::from("sequence,step,phase,reward,success");
    for i in 0..dim {
        out.push_str(&format!(",z{i}"));
    }
    out.push('\n');
    for seq in dataset {
        let states = model.states(seq)?;
        for (t, s) in states.iter().enumerate() {
            let phase = match Phase::from_one_hot(&seq.actions[t]) {
                Some(Phase::BeforeRotation) => "before_rotation",
                Some(Phase::Rotation) => "rotation",
                Some(Phase::Stopped) => "stopped",
                None => "unknown",
            };
            out.push_str(&format!("{},{t},{phase},{},{}", seq.id, seq.rewards[t], seq.success));
            for v in s {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
    }
    Ok(out)
}
