//! Direct next-frame predictor: an LSTM over `[o_t | a_t]` whose output,
//! joined with `a_{t+1}`, regresses `o_{t+1}` under squared error.

use numkit::{clip_global_norm, Activation, Adadelta, Checkpoint, Direction, Graph, Linear, LstmCell, NodeId, ParamStore, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{check_dim, invalid, Result};
use crate::sequence::{HapticSequence, ACTION_DIM, OBS_DIM};

#[derive(Clone, Debug, PartialEq)]
pub struct RnnConfig {
    pub obs_dim: usize,
    pub action_dim: usize,
    pub hidden: usize,
}

impl Default for RnnConfig {
    fn default() -> Self {
        Self {
            obs_dim: OBS_DIM,
            action_dim: ACTION_DIM,
            hidden: 64,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RnnPredictor {
    pub config: RnnConfig,
    pub params: ParamStore<f64>,
    pub lstm: LstmCell,
    pub head: Linear,
}

/// LSTM hidden and cell state.
#[derive(Clone, Debug, PartialEq)]
pub struct RnnState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl RnnState {
    /// Flattened `[h | c]`, the state handed to the Q-network.
    pub fn concat(&self) -> Vec<f64> {
        let mut v = self.h.clone();
        v.extend_from_slice(&self.c);
        v
    }

    pub fn split(v: &[f64], hidden: usize) -> Result<RnnState> {
        check_dim("rnn state", 2 * hidden, v.len())?;
        Ok(RnnState {
            h: v[..hidden].to_vec(),
            c: v[hidden..].to_vec(),
        })
    }
}

fn row(parts: &[&[f64]]) -> Result<Tensor<f64>> {
    Ok(Tensor::row(&parts.concat())?)
}

impl RnnPredictor {
    pub fn new<R: Rng + ?Sized>(config: RnnConfig, rng: &mut R) -> Result<Self> {
        if config.obs_dim == 0 || config.action_dim == 0 || config.hidden == 0 {
            return Err(invalid("rnn dimensions must be positive"));
        }
        let mut params = ParamStore::new();
        let lstm = LstmCell::new(&mut params, "rnn.lstm", config.obs_dim + config.action_dim, config.hidden, rng);
        let head = Linear::new(&mut params, "rnn.head", config.hidden + config.action_dim, config.obs_dim, rng);
        Ok(Self {
            config,
            params,
            lstm,
            head,
        })
    }

    pub fn initial_state(&self) -> RnnState {
        RnnState {
            h: vec![0.0; self.config.hidden],
            c: vec![0.0; self.config.hidden],
        }
    }

    /// Consumes one `(o_t, a_t)` pair.
    pub fn advance(&self, state: &RnnState, obs: &[f64], action: &[f64]) -> Result<RnnState> {
        check_dim("rnn observation", self.config.obs_dim, obs.len())?;
        check_dim("rnn action", self.config.action_dim, action.len())?;
        let mut g = Graph::new();
        let p = g.bind(&self.params);
        let x = g.constant(row(&[obs, action])?);
        let h = g.constant(Tensor::row(&state.h)?);
        let c = g.constant(Tensor::row(&state.c)?);
        let (h, c) = self.lstm.step(&mut g, &p, x, h, c)?;
        Ok(RnnState {
            h: g.value(h).data().to_vec(),
            c: g.value(c).data().to_vec(),
        })
    }

    /// Predicted next frame given the next phase vector.
    pub fn next_frame(&self, state: &RnnState, next_action: &[f64]) -> Result<Vec<f64>> {
        check_dim("rnn action", self.config.action_dim, next_action.len())?;
        let mut g = Graph::new();
        let p = g.bind(&self.params);
        let x = g.constant(row(&[&state.h, next_action])?);
        let y = self.head.forward(&mut g, &p, x, Activation::Identity)?;
        Ok(g.value(y).data().to_vec())
    }

    /// States after consuming each prefix of the sequence.
    pub fn states(&self, obs: &[Vec<f64>], actions: &[Vec<f64>]) -> Result<Vec<RnnState>> {
        check_dim("rnn actions", obs.len(), actions.len())?;
        let mut s = self.initial_state();
        let mut out = Vec::with_capacity(obs.len());
        for (o, a) in obs.iter().zip(actions) {
            s = self.advance(&s, o, a)?;
            out.push(s.clone());
        }
        Ok(out)
    }

    /// Open-loop prediction: each predicted frame is fed back as the next
    /// input together with the planned phase vector.
    pub fn predict_from(&self, state: &RnnState, future_actions: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let mut s = state.clone();
        let mut out = Vec::with_capacity(future_actions.len());
        for a in future_actions {
            let frame = self.next_frame(&s, a)?;
            s = self.advance(&s, &frame, a)?;
            out.push(frame);
        }
        Ok(out)
    }

    /// One-step model of the state under the next phase vector.
    pub fn transition(&self, state: &RnnState, next_action: &[f64]) -> Result<RnnState> {
        let frame = self.next_frame(state, next_action)?;
        self.advance(state, &frame, next_action)
    }

    /// Mean squared one-step error over the sequence, as a graph node.
    fn loss_node(&self, g: &mut Graph<f64>, p: &numkit::Bound<'_, f64>, seq: &HapticSequence) -> Result<NodeId> {
        let steps = seq.len();
        if steps < 2 {
            return Err(invalid(format!("sequence {} shorter than 2 steps", seq.id)));
        }
        let zeros = Tensor::zeros(&[1, self.config.hidden]);
        let (mut h, mut c) = (g.constant(zeros.clone()), g.constant(zeros));
        let mut hs = Vec::with_capacity(steps - 1);
        for t in 0..steps - 1 {
            let x = g.constant(row(&[&seq.observations[t], &seq.actions[t]])?);
            (h, c) = self.lstm.step(g, p, x, h, c)?;
            hs.push(h);
        }
        let hs = g.concat_rows(&hs)?;
        let next_actions = g.constant(Tensor::from_rows(&seq.actions[1..])?);
        let x = g.concat_cols(&[hs, next_actions])?;
        let pred = self.head.forward(g, p, x, Activation::Identity)?;
        let target = g.constant(Tensor::from_rows(&seq.observations[1..])?);
        let diff = g.sub(pred, target)?;
        let sq = g.square(diff)?;
        let total = g.sum(sq)?;
        Ok(g.scale(total, 1.0 / (steps - 1) as f64)?)
    }

    pub fn loss(&self, seq: &HapticSequence) -> Result<f64> {
        let mut g = Graph::new();
        let p = g.bind(&self.params);
        let l = self.loss_node(&mut g, &p, seq)?;
        Ok(g.scalar(l))
    }

    pub fn loss_gradients(&self, seq: &HapticSequence) -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut g = Graph::new();
        let p = g.bind(&self.params);
        let l = self.loss_node(&mut g, &p, seq)?;
        let grads = g.backward(l)?.params(&p);
        Ok((g.scalar(l), grads))
    }

    pub fn to_checkpoint(&self, ckpt: &mut Checkpoint) {
        ckpt.set_meta("rnn.obs_dim", self.config.obs_dim);
        ckpt.set_meta("rnn.action_dim", self.config.action_dim);
        ckpt.set_meta("rnn.hidden", self.config.hidden);
        self.params.export("rnn", ckpt);
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = RnnConfig {
            obs_dim: ckpt.meta_parse("rnn.obs_dim")?,
            action_dim: ckpt.meta_parse("rnn.action_dim")?,
            hidden: ckpt.meta_parse("rnn.hidden")?,
        };
        let mut net = Self::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
        net.params.import("rnn", ckpt)?;
        Ok(net)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RnnTrainConfig {
    pub epochs: usize,
    pub minibatch: usize,
    pub seed: u64,
    pub clip_norm: f64,
    pub rho: f64,
    pub epsilon: f64,
}

impl Default for RnnTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            minibatch: 8,
            seed: 0,
            clip_norm: 5.0,
            rho: 0.95,
            epsilon: 1e-6,
        }
    }
}

/// Minimizes the one-step squared error; returns the mean loss per epoch.
pub fn train_rnn(dataset: &[HapticSequence], net: &mut RnnPredictor, config: &RnnTrainConfig) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(invalid("empty dataset"));
    }
    if config.epochs == 0 || config.minibatch == 0 {
        return Err(invalid("epochs and minibatch must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Adadelta::new(config.rho, config.epsilon);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.minibatch) {
            let mut grads = net.params.zeros_like();
            for &i in batch {
                let (l, g) = net.loss_gradients(&dataset[i])?;
                total += l;
                for (acc, g) in grads.iter_mut().zip(&g) {
                    acc.add_assign(g);
                }
            }
            for g in &mut grads {
                g.scale_assign(1.0 / batch.len() as f64);
            }
            clip_global_norm(&mut grads, config.clip_norm);
            opt.step(&mut net.params, &grads, Direction::Minimize)?;
        }
        history.push(total / dataset.len() as f64);
    }
    Ok(history)
}
