//! Generative model: standard-normal initial prior, Gaussian transition over
//! (state, action), Gaussian observation and reward emissions.

use numkit::{Activation, Bound, Checkpoint, Graph, Linear, NodeId, ParamStore, Scalar, Tensor};
use rand::{Rng, SeedableRng};

use crate::error::{check_dim, invalid, Error, Result};
use crate::sequence::{ACTION_DIM, OBS_DIM};

/// Lower bound added to every softplus stddev.
pub const SIGMA_FLOOR: f64 = 1e-3;

/// Diagonal Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianDiag<T> {
    mean: Vec<T>,
    stddev: Vec<T>,
}

impl<T: Scalar> GaussianDiag<T> {
    pub fn new(mean: Vec<T>, stddev: Vec<T>) -> Result<Self> {
        check_dim("gaussian stddev", mean.len(), stddev.len())?;
        if mean.iter().chain(&stddev).any(|v| !v.is_finite()) {
            return Err(invalid("non-finite gaussian parameter"));
        }
        if let Some(s) = stddev.iter().find(|s| s.as_f64() < SIGMA_FLOOR) {
            return Err(Error::BelowFloor {
                value: s.as_f64(),
                floor: SIGMA_FLOOR,
            });
        }
        Ok(Self { mean, stddev })
    }

    /// N(0, I).
    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![T::zero(); dim],
            stddev: vec![T::one(); dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[T] {
        &self.mean
    }

    pub fn stddev(&self) -> &[T] {
        &self.stddev
    }

    /// `mean + eps ⊙ stddev`.
    pub fn sample(&self, eps: &[T]) -> Result<LatentState<T>> {
        check_dim("noise", self.dim(), eps.len())?;
        LatentState::new(
            self.mean
                .iter()
                .zip(&self.stddev)
                .zip(eps)
                .map(|((&m, &s), &e)| m + e * s)
                .collect(),
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentState<T>(Vec<T>);

impl<T: Scalar> LatentState<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("non-finite latent state"));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[T] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_values(self) -> Vec<T> {
        self.0
    }
}

/// Gaussian whose mean and stddev live in a graph, one row per item.
#[derive(Clone, Copy, Debug)]
pub struct GaussianNode {
    pub mean: NodeId,
    pub stddev: NodeId,
}

impl GaussianNode {
    /// Values of row `r` as a checked distribution.
    pub fn row<T: Scalar>(&self, g: &Graph<T>, r: usize) -> Result<GaussianDiag<T>> {
        let (m, s) = (g.value(self.mean), g.value(self.stddev));
        let d = m.cols();
        GaussianDiag::new(m.data()[r * d..(r + 1) * d].to_vec(), s.data()[r * d..(r + 1) * d].to_vec())
    }

    pub fn rows<T: Scalar>(&self, g: &Graph<T>) -> Result<Vec<GaussianDiag<T>>> {
        (0..g.value(self.mean).rows()).map(|r| self.row(g, r)).collect()
    }
}

/// Splits a `[n × 2d]` head into mean and `softplus(·) + floor` stddev.
pub fn gaussian_head<T: Scalar>(g: &mut Graph<T>, raw: NodeId, dim: usize, floor: f64) -> Result<GaussianNode> {
    let mean = g.slice_cols(raw, 0, dim)?;
    let pre = g.slice_cols(raw, dim, dim)?;
    let sp = g.softplus(pre)?;
    let stddev = g.shift(sp, T::lit(floor))?;
    Ok(GaussianNode { mean, stddev })
}

/// Sum over all entries of the diagonal Gaussian log density of `x`.
pub fn log_likelihood_node<T: Scalar>(g: &mut Graph<T>, x: NodeId, dist: &GaussianNode) -> Result<NodeId> {
    let diff = g.sub(x, dist.mean)?;
    let z = g.div(diff, dist.stddev)?;
    let z2 = g.square(z)?;
    let half_z2 = g.scale(z2, T::lit(0.5))?;
    let log_s = g.log(dist.stddev)?;
    let per = g.add(half_z2, log_s)?;
    let total = g.sum(per)?;
    let n = g.value(x).len() as f64;
    let neg = g.scale(total, -T::one())?;
    Ok(g.shift(neg, T::lit(-0.5 * n * std::f64::consts::TAU.ln()))?)
}

/// Summed `KL(q || p)` over all entries.
pub fn kl_node<T: Scalar>(g: &mut Graph<T>, q: &GaussianNode, p: &GaussianNode) -> Result<NodeId> {
    let log_p = g.log(p.stddev)?;
    let log_q = g.log(q.stddev)?;
    let log_ratio = g.sub(log_p, log_q)?;
    let vq = g.square(q.stddev)?;
    let dm = g.sub(q.mean, p.mean)?;
    let dm2 = g.square(dm)?;
    let num = g.add(vq, dm2)?;
    let vp = g.square(p.stddev)?;
    let ratio = g.div(num, vp)?;
    let half = g.scale(ratio, T::lit(0.5))?;
    let per = g.add(log_ratio, half)?;
    let per = g.shift(per, T::lit(-0.5))?;
    Ok(g.sum(per)?)
}

/// Diagonal Gaussian log density.
pub fn log_likelihood<T: Scalar>(x: &[T], dist: &GaussianDiag<T>) -> Result<T> {
    check_dim("log_likelihood", dist.dim(), x.len())?;
    let half_log_tau = T::lit(0.5 * std::f64::consts::TAU.ln());
    let mut total = T::zero();
    for ((&xi, &m), &s) in x.iter().zip(&dist.mean).zip(&dist.stddev) {
        if s.as_f64() < SIGMA_FLOOR {
            return Err(Error::BelowFloor {
                value: s.as_f64(),
                floor: SIGMA_FLOOR,
            });
        }
        let z = (xi - m) / s;
        total += -half_log_tau - s.ln() - T::lit(0.5) * z * z;
    }
    Ok(total)
}

/// Analytic `KL(q || p)` between diagonal Gaussians.
pub fn kl_diag<T: Scalar>(q: &GaussianDiag<T>, p: &GaussianDiag<T>) -> Result<T> {
    check_dim("kl_diag", p.dim(), q.dim())?;
    let half = T::lit(0.5);
    let mut total = T::zero();
    for i in 0..q.dim() {
        let (mq, sq, mp, sp) = (q.mean[i], q.stddev[i], p.mean[i], p.stddev[i]);
        let dm = mq - mp;
        total += (sp / sq).ln() + (sq * sq + dm * dm) / (T::lit(2.0) * sp * sp) - half;
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub latent_dim: usize,
    pub action_dim: usize,
    pub obs_dim: usize,
    pub hidden: usize,
    pub activation: Activation,
    pub sigma_floor: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            action_dim: ACTION_DIM,
            obs_dim: OBS_DIM,
            hidden: 64,
            activation: Activation::Tanh,
            sigma_floor: SIGMA_FLOOR,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.action_dim == 0 || self.obs_dim == 0 || self.hidden == 0 {
            return Err(invalid("generative model dimensions must be positive"));
        }
        if !(self.sigma_floor >= SIGMA_FLOOR) {
            return Err(invalid(format!("sigma floor {} below {SIGMA_FLOOR}", self.sigma_floor)));
        }
        Ok(())
    }
}

pub(crate) fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Identity => "identity",
        Activation::Tanh => "tanh",
        Activation::Relu => "relu",
        Activation::Softplus => "softplus",
    }
}

pub(crate) fn parse_activation(s: &str) -> Result<Activation> {
    Ok(match s {
        "identity" => Activation::Identity,
        "tanh" => Activation::Tanh,
        "relu" => Activation::Relu,
        "softplus" => Activation::Softplus,
        other => return Err(invalid(format!("unknown activation {other}"))),
    })
}

/// Hidden layer followed by a linear head producing `[mean | pre-stddev]`.
#[derive(Clone, Copy, Debug)]
pub struct TwoLayerNet {
    pub hidden: Linear,
    pub head: Linear,
    pub activation: Activation,
    pub out_dim: usize,
}

impl TwoLayerNet {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        hidden: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), input, hidden, rng),
            head: Linear::new(store, &format!("{name}.head"), hidden, 2 * out_dim, rng),
            activation,
            out_dim,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound<'_, T>,
        x: NodeId,
        floor: f64,
    ) -> Result<GaussianNode> {
        let h = self.hidden.forward(g, p, x, self.activation)?;
        let raw = self.head.forward(g, p, h, Activation::Identity)?;
        gaussian_head(g, raw, self.out_dim, floor)
    }
}

#[derive(Clone, Debug)]
pub struct GenerativeModel<T> {
    pub config: GenConfig,
    pub params: ParamStore<T>,
    pub transition_net: TwoLayerNet,
    pub observation_net: TwoLayerNet,
    pub reward_net: TwoLayerNet,
}

impl<T: Scalar> GenerativeModel<T> {
    pub fn new<R: Rng + ?Sized>(config: GenConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let (d, h, act) = (config.latent_dim, config.hidden, config.activation);
        let transition_net = TwoLayerNet::new(&mut params, "transition", d + config.action_dim, h, d, act, rng);
        let observation_net = TwoLayerNet::new(&mut params, "observation", d, h, config.obs_dim, act, rng);
        let reward_net = TwoLayerNet::new(&mut params, "reward", d, h, 1, act, rng);
        Ok(Self {
            config,
            params,
            transition_net,
            observation_net,
            reward_net,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    /// Transition over rows of `[states | actions]`.
    pub fn transition_node(&self, g: &mut Graph<T>, p: &Bound<'_, T>, states: NodeId, actions: NodeId) -> Result<GaussianNode> {
        check_dim("transition state", self.config.latent_dim, g.value(states).cols())?;
        check_dim("transition action", self.config.action_dim, g.value(actions).cols())?;
        let x = g.concat_cols(&[states, actions])?;
        self.transition_net.forward(g, p, x, self.config.sigma_floor)
    }

    pub fn observation_node(&self, g: &mut Graph<T>, p: &Bound<'_, T>, states: NodeId) -> Result<GaussianNode> {
        check_dim("observation state", self.config.latent_dim, g.value(states).cols())?;
        self.observation_net.forward(g, p, states, self.config.sigma_floor)
    }

    pub fn reward_node(&self, g: &mut Graph<T>, p: &Bound<'_, T>, states: NodeId) -> Result<GaussianNode> {
        check_dim("reward state", self.config.latent_dim, g.value(states).cols())?;
        self.reward_net.forward(g, p, states, self.config.sigma_floor)
    }

    pub fn prior_initial(&self) -> GaussianDiag<T> {
        GaussianDiag::standard(self.config.latent_dim)
    }

    pub fn transition(&self, s: &LatentState<T>, action: &[T]) -> Result<GaussianDiag<T>> {
        let mut g = Graph::new();
        let p = g.bind(&self.params);
        let sn = g.constant(Tensor::row(s.values())?);
        let an = g.constant(Tensor::row(action)?);
        self.transition_node(&mut g, &p, sn, an)?.row(&g, 0)
    }

    pub fn emit_observation(&self, s: &LatentState<T>) -> Result<GaussianDiag<T>> {
        let mut g = Graph::new();
        let p = g.bind(&self.params);
        let sn = g.constant(Tensor::row(s.values())?);
        self.observation_node(&mut g, &p, sn)?.row(&g, 0)
    }

    pub fn emit_reward(&self, s: &LatentState<T>) -> Result<GaussianDiag<T>> {
        let mut g = Graph::new();
        let p = g.bind(&self.params);
        let sn = g.constant(Tensor::row(s.values())?);
        self.reward_node(&mut g, &p, sn)?.row(&g, 0)
    }

    /// Noise-free rollout: for `k = 1..=horizon`, follows the transition mean
    /// under `actions[k - 1]` and decodes the observation mean.
    pub fn rollout(&self, s0: &LatentState<T>, actions: &[Vec<T>], horizon: usize) -> Result<Vec<Vec<T>>> {
        if actions.len() < horizon {
            return Err(invalid(format!("{} actions for horizon {horizon}", actions.len())));
        }
        let mut s = s0.clone();
        let mut out = Vec::with_capacity(horizon);
        for a in &actions[..horizon] {
            s = LatentState::new(self.transition(&s, a)?.mean().to_vec())?;
            out.push(self.emit_observation(&s)?.mean().to_vec());
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self, ckpt: &mut Checkpoint) {
        let c = &self.config;
        ckpt.set_meta("genmodel.latent_dim", c.latent_dim);
        ckpt.set_meta("genmodel.action_dim", c.action_dim);
        ckpt.set_meta("genmodel.obs_dim", c.obs_dim);
        ckpt.set_meta("genmodel.hidden", c.hidden);
        ckpt.set_meta("genmodel.activation", activation_name(c.activation));
        ckpt.set_meta("genmodel.sigma_floor", c.sigma_floor);
        self.params.export("genmodel", ckpt);
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = GenConfig {
            latent_dim: ckpt.meta_parse("genmodel.latent_dim")?,
            action_dim: ckpt.meta_parse("genmodel.action_dim")?,
            obs_dim: ckpt.meta_parse("genmodel.obs_dim")?,
            hidden: ckpt.meta_parse("genmodel.hidden")?,
            activation: parse_activation(&ckpt.meta_parse::<String>("genmodel.activation")?)?,
            sigma_floor: ckpt.meta_parse("genmodel.sigma_floor")?,
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut model = Self::new(config, &mut rng)?;
        model.params.import("genmodel", ckpt)?;
        Ok(model)
    }
}

/// Sets every parameter of a store to zero.
pub fn zero_params<T: Scalar>(store: &mut ParamStore<T>) {
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.get_mut(id).data_mut() {
            *v = T::zero();
        }
    }
}
