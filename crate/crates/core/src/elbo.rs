//! The variational lower bound and its Adadelta training loop.
//!
//! For one sequence with posteriors `q_t` and `L` reparameterized samples
//! `s^(l)`:
//!
//! ```text
//! ELBO = -KL(q_1 || N(0, I))
//!        - 1/L Σ_l Σ_{t≥2} KL(q_t || p(s_t | s_{t-1}^(l), a_t))
//!        + 1/L Σ_l Σ_t [log p(o_t | s_t^(l)) + log p(r_t | s_t^(l))]
//! ```
//!
//! `a_t` is the phase vector recorded at step `t`, i.e. the action executed
//! between `t - 1` and `t`.

use std::time::Instant;

use numkit::{clip_global_norm, Adadelta, Bound, Direction, Graph, NodeId, Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, invalid, Error, Result};
use crate::genmodel::{kl_node, log_likelihood_node, GaussianNode, GenerativeModel};
use crate::recognition::PosteriorEncoder;
use crate::sequence::HapticSequence;

#[derive(Clone, Debug, PartialEq)]
pub struct ElboConfig {
    /// Samples `L` per step.
    pub samples: usize,
    pub minibatch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub kl_weight: f64,
    /// Linear KL warm-up length in epochs; 0 disables it.
    pub kl_anneal_epochs: usize,
    pub clip_norm: f64,
    pub rho: f64,
    pub epsilon: f64,
}

impl Default for ElboConfig {
    fn default() -> Self {
        Self {
            samples: 1,
            minibatch: 8,
            epochs: 200,
            seed: 0,
            kl_weight: 1.0,
            kl_anneal_epochs: 0,
            clip_norm: 5.0,
            rho: 0.95,
            epsilon: 1e-6,
        }
    }
}

impl ElboConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 || self.minibatch == 0 {
            return Err(invalid("samples and minibatch must be at least 1"));
        }
        if !(self.kl_weight >= 0.0) || !(self.clip_norm > 0.0) {
            return Err(invalid("kl_weight must be >= 0 and clip_norm > 0"));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) || !(self.epsilon > 0.0) {
            return Err(invalid("adadelta needs rho in (0, 1) and epsilon > 0"));
        }
        Ok(())
    }

    fn kl_weight_at(&self, epoch: usize) -> f64 {
        if self.kl_anneal_epochs == 0 {
            self.kl_weight
        } else {
            self.kl_weight * ((epoch + 1) as f64 / self.kl_anneal_epochs as f64).min(1.0)
        }
    }
}

/// Value of the bound and its parts for one sequence, summed over steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboTerms<T> {
    pub elbo: T,
    pub kl_initial: T,
    pub kl_transition: T,
    pub ll_obs: T,
    pub ll_reward: T,
}

impl<T: Scalar> ElboTerms<T> {
    pub fn kl(&self) -> T {
        self.kl_initial + self.kl_transition
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ElboNodes {
    /// What training maximizes: the bound with the KL part scaled by `kl_weight`.
    pub objective: NodeId,
    pub elbo: NodeId,
    pub kl_initial: NodeId,
    pub kl_transition: NodeId,
    pub ll_obs: NodeId,
    pub ll_reward: NodeId,
}

impl ElboNodes {
    pub fn terms<T: Scalar>(&self, g: &Graph<T>) -> ElboTerms<T> {
        ElboTerms {
            elbo: g.scalar(self.elbo),
            kl_initial: g.scalar(self.kl_initial),
            kl_transition: g.scalar(self.kl_transition),
            ll_obs: g.scalar(self.ll_obs),
            ll_reward: g.scalar(self.ll_reward),
        }
    }
}

/// Standard normal noise shaped `[samples][steps][dim]`.
pub fn draw_noise<T: Scalar, R: Rng + ?Sized>(rng: &mut R, samples: usize, steps: usize, dim: usize) -> Vec<Vec<Vec<T>>> {
    (0..samples)
        .map(|_| {
            (0..steps)
                .map(|_| (0..dim).map(|_| T::lit(rng.sample::<f64, _>(StandardNormal))).collect())
                .collect()
        })
        .collect()
}

fn matrix<T: Scalar>(rows: &[Vec<f64>]) -> Result<Tensor<T>> {
    let cols = rows.first().map_or(0, Vec::len);
    let data = rows.iter().flat_map(|r| r.iter().map(|&v| T::lit(v))).collect();
    Ok(Tensor::new(vec![rows.len(), cols], data)?)
}

fn slice_gaussian<T: Scalar>(g: &mut Graph<T>, q: &GaussianNode, start: usize, len: usize) -> Result<GaussianNode> {
    Ok(GaussianNode {
        mean: g.slice_rows(q.mean, start, len)?,
        stddev: g.slice_rows(q.stddev, start, len)?,
    })
}

/// Records the bound for one sequence on `g`.
#[allow(clippy::too_many_arguments)]
pub fn elbo_nodes<T: Scalar, E: PosteriorEncoder<T> + ?Sized>(
    g: &mut Graph<T>,
    model: &GenerativeModel<T>,
    gp: &Bound<'_, T>,
    encoder: &E,
    ep: &Bound<'_, T>,
    seq: &HapticSequence,
    noise: &[Vec<Vec<T>>],
    kl_weight: T,
) -> Result<ElboNodes> {
    let steps = seq.len();
    if steps < 2 {
        return Err(invalid(format!("sequence {}: bound needs at least 2 steps", seq.id)));
    }
    check_dim("reward steps", steps, seq.rewards.len())?;
    let d = model.latent_dim();
    check_dim("encoder latent", d, encoder.latent_dim())?;
    if noise.is_empty() {
        return Err(invalid("at least one noise sample required"));
    }
    for sample in noise {
        check_dim("noise steps", steps, sample.len())?;
        for e in sample {
            check_dim("noise dim", d, e.len())?;
        }
    }

    let q = encoder.encode_nodes(g, ep, &seq.observations, &seq.actions)?;
    let obs = g.constant(matrix(&seq.observations)?);
    let rewards: Vec<Vec<f64>> = seq.rewards.iter().map(|&r| vec![r]).collect();
    let rew = g.constant(matrix(&rewards)?);
    let next_actions = g.constant(matrix(&seq.actions[1..])?);

    let prior = GaussianNode {
        mean: g.constant(Tensor::zeros(&[1, d])),
        stddev: g.constant(Tensor::filled(&[1, d], T::one())),
    };
    let q_first = slice_gaussian(g, &q, 0, 1)?;
    let q_rest = slice_gaussian(g, &q, 1, steps - 1)?;
    let kl_initial = kl_node(g, &q_first, &prior)?;

    let mut kl_parts = Vec::with_capacity(noise.len());
    let mut obs_parts = Vec::with_capacity(noise.len());
    let mut rew_parts = Vec::with_capacity(noise.len());
    for sample in noise {
        let eps = g.constant(matrix_t(sample)?);
        let spread = g.mul(eps, q.stddev)?;
        let z = g.add(q.mean, spread)?;
        let z_prev = g.slice_rows(z, 0, steps - 1)?;
        let prior_t = model.transition_node(g, gp, z_prev, next_actions)?;
        kl_parts.push(kl_node(g, &q_rest, &prior_t)?);
        let o_dist = model.observation_node(g, gp, z)?;
        check_dim("observation channels", g.value(o_dist.mean).cols(), g.value(obs).cols())?;
        obs_parts.push(log_likelihood_node(g, obs, &o_dist)?);
        let r_dist = model.reward_node(g, gp, z)?;
        rew_parts.push(log_likelihood_node(g, rew, &r_dist)?);
    }
    let inv_l = T::one() / T::lit(noise.len() as f64);
    let average = |g: &mut Graph<T>, parts: &[NodeId]| -> Result<NodeId> {
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = g.add(acc, p)?;
        }
        Ok(g.scale(acc, inv_l)?)
    };
    let kl_transition = average(g, &kl_parts)?;
    let ll_obs = average(g, &obs_parts)?;
    let ll_reward = average(g, &rew_parts)?;

    let kl = g.add(kl_initial, kl_transition)?;
    let ll = g.add(ll_obs, ll_reward)?;
    let elbo = g.sub(ll, kl)?;
    let weighted = g.scale(kl, kl_weight)?;
    let objective = g.sub(ll, weighted)?;
    Ok(ElboNodes {
        objective,
        elbo,
        kl_initial,
        kl_transition,
        ll_obs,
        ll_reward,
    })
}

fn matrix_t<T: Scalar>(rows: &[Vec<T>]) -> Result<Tensor<T>> {
    let cols = rows.first().map_or(0, Vec::len);
    Ok(Tensor::new(vec![rows.len(), cols], rows.concat())?)
}

/// Evaluates the bound for fixed noise.
pub fn elbo_value<T: Scalar, E: PosteriorEncoder<T> + ?Sized>(
    model: &GenerativeModel<T>,
    encoder: &E,
    seq: &HapticSequence,
    noise: &[Vec<Vec<T>>],
) -> Result<ElboTerms<T>> {
    let mut g = Graph::new();
    let gp = g.bind(&model.params);
    let ep = g.bind(encoder.params());
    let nodes = elbo_nodes(&mut g, model, &gp, encoder, &ep, seq, noise, T::one())?;
    Ok(nodes.terms(&g))
}

/// Bound value plus gradients of the weighted objective with respect to the
/// generative and encoder parameters, in store order.
pub fn elbo_gradients<T: Scalar, E: PosteriorEncoder<T> + ?Sized>(
    model: &GenerativeModel<T>,
    encoder: &E,
    seq: &HapticSequence,
    noise: &[Vec<Vec<T>>],
    kl_weight: T,
) -> Result<(ElboTerms<T>, Vec<Tensor<T>>, Vec<Tensor<T>>)> {
    let mut g = Graph::new();
    let gp = g.bind(&model.params);
    let ep = g.bind(encoder.params());
    let nodes = elbo_nodes(&mut g, model, &gp, encoder, &ep, seq, noise, kl_weight)?;
    let grads = g.backward(nodes.objective)?;
    Ok((nodes.terms(&g), grads.params(&gp), grads.params(&ep)))
}

/// Epoch means of the per-step-averaged bound and its parts.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub elbo: f64,
    pub kl: f64,
    pub ll_obs: f64,
    pub ll_reward: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
}

impl TrainReport {
    /// CSV with a header row. Wall times are left empty unless requested so
    /// that reruns produce identical bytes.
    pub fn to_csv(&self, with_timing: bool) -> String {
        let mut out = String::from("epoch,elbo,kl,ll_obs,ll_reward,seconds\n");
        for e in &self.epochs {
            let secs = if with_timing { format!("{:.3}", e.seconds) } else { String::new() };
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.epoch, e.elbo, e.kl, e.ll_obs, e.ll_reward, secs
            ));
        }
        out
    }

    /// Trailing moving average of the ELBO; entry `i` covers epochs
    /// `i + 1 - window ..= i` and exists for `i >= window - 1`.
    pub fn moving_average(&self, window: usize) -> Vec<f64> {
        if window == 0 || self.epochs.len() < window {
            return Vec::new();
        }
        self.epochs
            .windows(window)
            .map(|w| w.iter().map(|e| e.elbo).sum::<f64>() / window as f64)
            .collect()
    }
}

fn elbo_failure(err: Error, epoch: usize, seq: &HapticSequence) -> Error {
    match err {
        Error::Num(numkit::Error::NonFinite(_)) => Error::NonFiniteElbo {
            epoch,
            sequence: seq.id.clone(),
        },
        other => other,
    }
}

/// Maximizes the bound with minibatch Adadelta. `on_epoch` runs after every
/// epoch with the current parameters (checkpointing, logging).
pub fn train<T, E, F>(
    dataset: &[HapticSequence],
    model: &mut GenerativeModel<T>,
    encoder: &mut E,
    config: &ElboConfig,
    mut on_epoch: F,
) -> Result<TrainReport>
where
    T: Scalar,
    E: PosteriorEncoder<T>,
    F: FnMut(&EpochStats, &GenerativeModel<T>, &E) -> Result<()>,
{
    config.validate()?;
    if dataset.is_empty() {
        return Err(invalid("empty dataset"));
    }
    if let Some(s) = dataset.iter().find(|s| s.len() < 2) {
        return Err(invalid(format!("sequence {} shorter than 2 steps", s.id)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt_gen = Adadelta::new(T::lit(config.rho), T::lit(config.epsilon));
    let mut opt_enc = Adadelta::new(T::lit(config.rho), T::lit(config.epsilon));
    let d = model.latent_dim();
    let n_gen = model.params.len();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut report = TrainReport::default();

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let kl_weight = T::lit(config.kl_weight_at(epoch));
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 4];
        for batch in order.chunks(config.minibatch) {
            let mut grads: Vec<Tensor<T>> = model.params.zeros_like();
            grads.extend(encoder.params().zeros_like());
            for &i in batch {
                let seq = &dataset[i];
                let noise = draw_noise::<T, _>(&mut rng, config.samples, seq.len(), d);
                let (terms, g_gen, g_enc) =
                    elbo_gradients(model, encoder, seq, &noise, kl_weight).map_err(|e| elbo_failure(e, epoch, seq))?;
                for kl in [terms.kl_initial, terms.kl_transition] {
                    if kl.as_f64() < -1e-9 {
                        return Err(Error::NegativeKl {
                            value: kl.as_f64(),
                            epoch,
                            sequence: seq.id.clone(),
                        });
                    }
                }
                if !terms.elbo.is_finite() {
                    return Err(Error::NonFiniteElbo {
                        epoch,
                        sequence: seq.id.clone(),
                    });
                }
                for (acc, g) in grads.iter_mut().zip(g_gen.iter().chain(&g_enc)) {
                    acc.add_assign(g);
                }
                let steps = seq.len() as f64;
                sums[0] += terms.elbo.as_f64() / steps;
                sums[1] += terms.kl().as_f64() / steps;
                sums[2] += terms.ll_obs.as_f64() / steps;
                sums[3] += terms.ll_reward.as_f64() / steps;
            }
            let inv = T::one() / T::lit(batch.len() as f64);
            for g in &mut grads {
                g.scale_assign(inv);
            }
            clip_global_norm(&mut grads, T::lit(config.clip_norm));
            let enc_grads = grads.split_off(n_gen);
            opt_gen.step(&mut model.params, &grads, Direction::Maximize)?;
            opt_enc.step(encoder.params_mut(), &enc_grads, Direction::Maximize)?;
        }
        let n = dataset.len() as f64;
        let stats = EpochStats {
            epoch: epoch + 1,
            elbo: sums[0] / n,
            kl: sums[1] / n,
            ll_obs: sums[2] / n,
            ll_reward: sums[3] / n,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&stats, model, encoder)?;
        report.epochs.push(stats);
    }
    Ok(report)
}
