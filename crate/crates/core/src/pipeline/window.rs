//! Non-recurrent encoder over a sliding window of recent frames.

use std::collections::VecDeque;

use numkit::{Activation, Bound, Checkpoint, Graph, Linear, ParamStore, Scalar, Tensor};
use rand::{Rng, SeedableRng};

use crate::error::{invalid, Result};
use crate::genmodel::{gaussian_head, GaussianDiag, GaussianNode, SIGMA_FLOOR};
use crate::recognition::{check_inputs, PosteriorEncoder, PosteriorTracker};
use crate::sequence::{ACTION_DIM, OBS_DIM};

#[derive(Clone, Debug, PartialEq)]
pub struct WindowConfig {
    pub obs_dim: usize,
    pub window: usize,
    pub hidden: usize,
    pub latent_dim: usize,
    pub sigma_floor: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            obs_dim: OBS_DIM,
            window: 5,
            hidden: 64,
            latent_dim: 16,
            sigma_floor: SIGMA_FLOOR,
        }
    }
}

/// Posterior at step t from frames `t - window + 1 ..= t` only; frames before
/// the start are zeros and actions are ignored.
#[derive(Clone, Debug)]
pub struct WindowEncoder<T> {
    pub config: WindowConfig,
    pub params: ParamStore<T>,
    pub hidden: Linear,
    pub head: Linear,
}

impl<T: Scalar> WindowEncoder<T> {
    pub fn new<R: Rng + ?Sized>(config: WindowConfig, rng: &mut R) -> Result<Self> {
        let c = &config;
        if c.obs_dim == 0 || c.window == 0 || c.hidden == 0 || c.latent_dim == 0 {
            return Err(invalid("window encoder dimensions must be positive"));
        }
        if !(c.sigma_floor >= SIGMA_FLOOR) {
            return Err(invalid(format!("sigma floor {} below {SIGMA_FLOOR}", c.sigma_floor)));
        }
        let mut params = ParamStore::new();
        let hidden = Linear::new(&mut params, "window.hidden", c.window * c.obs_dim, c.hidden, rng);
        let head = Linear::new(&mut params, "window.head", c.hidden, 2 * c.latent_dim, rng);
        Ok(Self {
            config,
            params,
            hidden,
            head,
        })
    }

    /// Sequences shorter than the window are not used for training.
    pub fn accepts(&self, steps: usize) -> bool {
        steps >= self.config.window
    }

    fn windowed(&self, obs: &[Vec<f64>]) -> Result<Tensor<T>> {
        let (w, k) = (self.config.window, self.config.obs_dim);
        let mut data = Vec::with_capacity(obs.len() * w * k);
        for t in 0..obs.len() {
            for j in 0..w {
                // oldest frame first
                match (t + j + 1).checked_sub(w) {
                    Some(s) => data.extend(obs[s].iter().map(|&x| T::lit(x))),
                    None => data.extend(std::iter::repeat_n(T::zero(), k)),
                }
            }
        }
        Ok(Tensor::new(vec![obs.len(), w * k], data)?)
    }

    fn head_nodes(&self, g: &mut Graph<T>, p: &Bound<'_, T>, x: Tensor<T>) -> Result<GaussianNode> {
        let x = g.constant(x);
        let h = self.hidden.forward(g, p, x, Activation::Tanh)?;
        let raw = self.head.forward(g, p, h, Activation::Identity)?;
        gaussian_head(g, raw, self.config.latent_dim, self.config.sigma_floor)
    }

    pub fn to_checkpoint(&self, ckpt: &mut Checkpoint) {
        let c = &self.config;
        ckpt.set_meta("window.obs_dim", c.obs_dim);
        ckpt.set_meta("window.window", c.window);
        ckpt.set_meta("window.hidden", c.hidden);
        ckpt.set_meta("window.latent_dim", c.latent_dim);
        ckpt.set_meta("window.sigma_floor", c.sigma_floor);
        self.params.export("window", ckpt);
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = WindowConfig {
            obs_dim: ckpt.meta_parse("window.obs_dim")?,
            window: ckpt.meta_parse("window.window")?,
            hidden: ckpt.meta_parse("window.hidden")?,
            latent_dim: ckpt.meta_parse("window.latent_dim")?,
            sigma_floor: ckpt.meta_parse("window.sigma_floor")?,
        };
        let mut enc = Self::new(config, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
        enc.params.import("window", ckpt)?;
        Ok(enc)
    }
}

impl<T: Scalar> PosteriorEncoder<T> for WindowEncoder<T> {
    fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn encode_nodes(
        &self,
        g: &mut Graph<T>,
        p: &Bound<'_, T>,
        obs: &[Vec<f64>],
        actions: &[Vec<f64>],
    ) -> Result<GaussianNode> {
        check_inputs(obs, actions, self.config.obs_dim, ACTION_DIM)?;
        let x = self.windowed(obs)?;
        self.head_nodes(g, p, x)
    }

    fn tracker(&self) -> Box<dyn PosteriorTracker<T> + '_> {
        Box::new(WindowTracker {
            enc: self,
            frames: VecDeque::new(),
        })
    }
}

struct WindowTracker<'a, T> {
    enc: &'a WindowEncoder<T>,
    frames: VecDeque<Vec<f64>>,
}

impl<T: Scalar> PosteriorTracker<T> for WindowTracker<'_, T> {
    fn step(&mut self, obs: &[f64], action: &[f64]) -> Result<GaussianDiag<T>> {
        let enc = self.enc;
        check_inputs(&[obs.to_vec()], &[action.to_vec()], enc.config.obs_dim, ACTION_DIM)?;
        self.frames.push_back(obs.to_vec());
        if self.frames.len() > enc.config.window {
            self.frames.pop_front();
        }
        let frames: Vec<Vec<f64>> = self.frames.iter().cloned().collect();
        let all = enc.windowed(&frames)?;
        let last = all.rows() - 1;
        let width = all.cols();
        let row = Tensor::new(vec![1, width], all.data()[last * width..].to_vec())?;
        let mut g = Graph::new();
        let p = g.bind(&enc.params);
        enc.head_nodes(&mut g, &p, row)?.row(&g, 0)
    }
}
