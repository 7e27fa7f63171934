//! Approximate posterior: two stacked LSTMs over `[observation | action]`
//! with a per-step diagonal Gaussian head. Rewards are not an input.

use numkit::{Activation, Bound, Checkpoint, Graph, Linear, LstmCell, NodeId, ParamStore, Scalar, Tensor};
use rand::{Rng, SeedableRng};

use crate::error::{check_dim, invalid, Result};
use crate::genmodel::{gaussian_head, GaussianDiag, GaussianNode, LatentState, SIGMA_FLOOR};
use crate::sequence::{ACTION_DIM, OBS_DIM};

/// Per-step posteriors of one sequence.
pub type PosteriorSequence<T> = Vec<GaussianDiag<T>>;

/// Step-by-step posterior filtering for closed-loop use.
pub trait PosteriorTracker<T> {
    fn step(&mut self, obs: &[f64], action: &[f64]) -> Result<GaussianDiag<T>>;
}

/// Anything that maps a sequence prefix to per-step latent posteriors and can
/// be trained through the bound.
pub trait PosteriorEncoder<T: Scalar> {
    fn latent_dim(&self) -> usize;
    fn params(&self) -> &ParamStore<T>;
    fn params_mut(&mut self) -> &mut ParamStore<T>;

    /// Posteriors for every step as one `[T × d]` Gaussian.
    fn encode_nodes(
        &self,
        g: &mut Graph<T>,
        p: &Bound<'_, T>,
        obs: &[Vec<f64>],
        actions: &[Vec<f64>],
    ) -> Result<GaussianNode>;

    fn tracker(&self) -> Box<dyn PosteriorTracker<T> + '_>;

    fn encode(&self, obs: &[Vec<f64>], actions: &[Vec<f64>]) -> Result<PosteriorSequence<T>> {
        let mut g = Graph::new();
        let p = g.bind(self.params());
        self.encode_nodes(&mut g, &p, obs, actions)?.rows(&g)
    }
}

/// `s_t = μ_t + ε_t ⊙ σ_t` for every step.
pub fn sample<T: Scalar>(post: &[GaussianDiag<T>], noise: &[Vec<T>]) -> Result<Vec<LatentState<T>>> {
    check_dim("noise steps", post.len(), noise.len())?;
    post.iter().zip(noise).map(|(q, e)| q.sample(e)).collect()
}

pub(crate) fn check_inputs(obs: &[Vec<f64>], actions: &[Vec<f64>], obs_dim: usize, action_dim: usize) -> Result<()> {
    if obs.is_empty() {
        return Err(invalid("empty sequence"));
    }
    check_dim("encoder actions", obs.len(), actions.len())?;
    for (o, a) in obs.iter().zip(actions) {
        check_dim("encoder observation", obs_dim, o.len())?;
        check_dim("encoder action", action_dim, a.len())?;
        if o.iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(invalid("observation outside [-1, 1]"));
        }
    }
    Ok(())
}

fn row_of<T: Scalar>(parts: &[&[f64]]) -> Result<Tensor<T>> {
    let v: Vec<T> = parts.iter().flat_map(|p| p.iter().map(|&x| T::lit(x))).collect();
    Ok(Tensor::row(&v)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecConfig {
    pub obs_dim: usize,
    pub action_dim: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub latent_dim: usize,
    pub sigma_floor: f64,
}

impl Default for RecConfig {
    fn default() -> Self {
        Self {
            obs_dim: OBS_DIM,
            action_dim: ACTION_DIM,
            hidden1: 64,
            hidden2: 64,
            latent_dim: 16,
            sigma_floor: SIGMA_FLOOR,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RecognitionNet<T> {
    pub config: RecConfig,
    pub params: ParamStore<T>,
    pub layer1: LstmCell,
    pub layer2: LstmCell,
    pub head: Linear,
}

impl<T: Scalar> RecognitionNet<T> {
    pub fn new<R: Rng + ?Sized>(config: RecConfig, rng: &mut R) -> Result<Self> {
        let c = &config;
        if c.obs_dim == 0 || c.action_dim == 0 || c.hidden1 == 0 || c.hidden2 == 0 || c.latent_dim == 0 {
            return Err(invalid("recognition dimensions must be positive"));
        }
        if !(c.sigma_floor >= SIGMA_FLOOR) {
            return Err(invalid(format!("sigma floor {} below {SIGMA_FLOOR}", c.sigma_floor)));
        }
        let mut params = ParamStore::new();
        let layer1 = LstmCell::new(&mut params, "lstm1", c.obs_dim + c.action_dim, c.hidden1, rng);
        let layer2 = LstmCell::new(&mut params, "lstm2", c.hidden1, c.hidden2, rng);
        let head = Linear::new(&mut params, "head", c.hidden2, 2 * c.latent_dim, rng);
        Ok(Self {
            config,
            params,
            layer1,
            layer2,
            head,
        })
    }

    fn zeros(g: &mut Graph<T>, n: usize) -> NodeId {
        g.constant(Tensor::zeros(&[1, n]))
    }

    fn head_nodes(&self, g: &mut Graph<T>, p: &Bound<'_, T>, h2: NodeId) -> Result<GaussianNode> {
        let raw = self.head.forward(g, p, h2, Activation::Identity)?;
        gaussian_head(g, raw, self.config.latent_dim, self.config.sigma_floor)
    }

    pub fn to_checkpoint(&self, ckpt: &mut Checkpoint) {
        let c = &self.config;
        ckpt.set_meta("recognition.obs_dim", c.obs_dim);
        ckpt.set_meta("recognition.action_dim", c.action_dim);
        ckpt.set_meta("recognition.hidden1", c.hidden1);
        ckpt.set_meta("recognition.hidden2", c.hidden2);
        ckpt.set_meta("recognition.latent_dim", c.latent_dim);
        ckpt.set_meta("recognition.sigma_floor", c.sigma_floor);
        self.params.export("recognition", ckpt);
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = RecConfig {
            obs_dim: ckpt.meta_parse("recognition.obs_dim")?,
            action_dim: ckpt.meta_parse("recognition.action_dim")?,
            hidden1: ckpt.meta_parse("recognition.hidden1")?,
            hidden2: ckpt.meta_parse("recognition.hidden2")?,
            latent_dim: ckpt.meta_parse("recognition.latent_dim")?,
            sigma_floor: ckpt.meta_parse("recognition.sigma_floor")?,
        };
        let mut net = Self::new(config, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
        net.params.import("recognition", ckpt)?;
        Ok(net)
    }
}

impl<T: Scalar> PosteriorEncoder<T> for RecognitionNet<T> {
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
        let c = &self.config;
        check_inputs(obs, actions, c.obs_dim, c.action_dim)?;
        let (mut h1, mut c1) = (Self::zeros(g, c.hidden1), Self::zeros(g, c.hidden1));
        let (mut h2, mut c2) = (Self::zeros(g, c.hidden2), Self::zeros(g, c.hidden2));
        let mut tops = Vec::with_capacity(obs.len());
        for (o, a) in obs.iter().zip(actions) {
            let x = g.constant(row_of(&[o, a])?);
            (h1, c1) = self.layer1.step(g, p, x, h1, c1)?;
            (h2, c2) = self.layer2.step(g, p, h1, h2, c2)?;
            tops.push(h2);
        }
        let stacked = g.concat_rows(&tops)?;
        self.head_nodes(g, p, stacked)
    }

    fn tracker(&self) -> Box<dyn PosteriorTracker<T> + '_> {
        let c = &self.config;
        Box::new(RecognitionTracker {
            net: self,
            h1: vec![T::zero(); c.hidden1],
            c1: vec![T::zero(); c.hidden1],
            h2: vec![T::zero(); c.hidden2],
            c2: vec![T::zero(); c.hidden2],
        })
    }
}

/// Carries LSTM state between calls; matches [`PosteriorEncoder::encode`]
/// on the same prefix exactly.
pub struct RecognitionTracker<'a, T> {
    net: &'a RecognitionNet<T>,
    h1: Vec<T>,
    c1: Vec<T>,
    h2: Vec<T>,
    c2: Vec<T>,
}

impl<T: Scalar> PosteriorTracker<T> for RecognitionTracker<'_, T> {
    fn step(&mut self, obs: &[f64], action: &[f64]) -> Result<GaussianDiag<T>> {
        let net = self.net;
        let c = &net.config;
        check_inputs(&[obs.to_vec()], &[action.to_vec()], c.obs_dim, c.action_dim)?;
        let mut g = Graph::new();
        let p = g.bind(&net.params);
        let x = g.constant(row_of(&[obs, action])?);
        let h1 = g.constant(Tensor::row(&self.h1)?);
        let c1 = g.constant(Tensor::row(&self.c1)?);
        let h2 = g.constant(Tensor::row(&self.h2)?);
        let c2 = g.constant(Tensor::row(&self.c2)?);
        let (h1, c1) = net.layer1.step(&mut g, &p, x, h1, c1)?;
        let (h2, c2) = net.layer2.step(&mut g, &p, h1, h2, c2)?;
        let post = net.head_nodes(&mut g, &p, h2)?.row(&g, 0)?;
        self.h1 = g.value(h1).data().to_vec();
        self.c1 = g.value(c1).data().to_vec();
        self.h2 = g.value(h2).data().to_vec();
        self.c2 = g.value(c2).data().to_vec();
        Ok(post)
    }
}
