//! Offline deep Q-learning in the learned latent space.
//!
//! Ground-truth tuples come from posterior samples of recorded sequences.
//! Each iteration additionally explores one decision from every state of a
//! successful sequence: the learned transition mean gives the next state and
//! any deviation from the recorded decision earns -1. The Q-network is then
//! regressed onto `y = r + γ max_a' Q(s', a')` (no bootstrap at terminals).

use numkit::{clip_global_norm, Activation, Adadelta, Bound, Checkpoint, Direction, Graph, Linear, NodeId, ParamStore, Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{check_dim, invalid, Result};
use crate::sequence::{action_after, Decision, HapticSequence, NUM_DECISIONS};

#[derive(Clone, Debug, PartialEq)]
pub struct TransitionTuple<T> {
    pub state: Vec<T>,
    pub action: usize,
    pub reward: T,
    pub next: Vec<T>,
    pub terminal: bool,
}

/// A state of a successful sequence together with what the data did there.
#[derive(Clone, Debug, PartialEq)]
pub struct ExploreStart<T> {
    pub state: Vec<T>,
    pub action: usize,
    pub reward: T,
    pub terminal: bool,
    /// Phase vector fed to the transition model for each decision index.
    pub action_vectors: Vec<Vec<T>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DgtSet<T> {
    pub tuples: Vec<TransitionTuple<T>>,
    pub starts: Vec<ExploreStart<T>>,
}

/// Batched learned transition: `(states, phase vectors) -> next-state means`.
pub type TransitionFn<'a, T> = dyn Fn(&[Vec<T>], &[Vec<T>]) -> Result<Vec<Vec<T>>> + 'a;

fn lit_vec<T: Scalar>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::lit(x)).collect()
}

/// One tuple per consecutive step pair; the last pair of each sequence is
/// terminal. `states_of` returns one latent state per step.
pub fn build_dgt<T: Scalar>(
    dataset: &[HapticSequence],
    mut states_of: impl FnMut(&HapticSequence) -> Result<Vec<Vec<T>>>,
) -> Result<DgtSet<T>> {
    let mut out = DgtSet {
        tuples: Vec::new(),
        starts: Vec::new(),
    };
    let mut dim = None;
    for seq in dataset {
        let steps = seq.len();
        if steps < 2 {
            return Err(invalid(format!("sequence {} shorter than 2 steps", seq.id)));
        }
        let states = states_of(seq)?;
        check_dim("latent states per sequence", steps, states.len())?;
        for s in &states {
            let d = *dim.get_or_insert(s.len());
            check_dim("latent state", d, s.len())?;
            if s.iter().any(|v| !v.is_finite()) {
                return Err(invalid(format!("non-finite latent state in {}", seq.id)));
            }
        }
        for t in 0..steps - 1 {
            let action = seq.decision(t).index();
            let reward = T::lit(seq.rewards[t + 1]);
            let terminal = t == steps - 2;
            out.tuples.push(TransitionTuple {
                state: states[t].clone(),
                action,
                reward,
                next: states[t + 1].clone(),
                terminal,
            });
            if seq.success {
                let action_vectors = (0..NUM_DECISIONS)
                    .map(|k| {
                        let d = Decision::from_index(k).expect("decision index");
                        lit_vec(&action_after(&seq.actions[t], &seq.actions[t + 1], d))
                    })
                    .collect();
                out.starts.push(ExploreStart {
                    state: states[t].clone(),
                    action,
                    reward,
                    terminal,
                    action_vectors,
                });
            }
        }
    }
    Ok(out)
}

/// Two fully connected layers `d -> hidden (tanh) -> |A|`.
#[derive(Clone, Debug)]
pub struct QNetwork<T> {
    pub params: ParamStore<T>,
    pub hidden: Linear,
    pub out: Linear,
    pub state_dim: usize,
    pub num_actions: usize,
}

impl<T: Scalar> QNetwork<T> {
    pub fn new<R: Rng + ?Sized>(state_dim: usize, hidden: usize, num_actions: usize, rng: &mut R) -> Result<Self> {
        if state_dim == 0 || hidden == 0 || num_actions == 0 {
            return Err(invalid("Q-network dimensions must be positive"));
        }
        let mut params = ParamStore::new();
        let h = Linear::new(&mut params, "q.hidden", state_dim, hidden, rng);
        let out = Linear::new(&mut params, "q.out", hidden, num_actions, rng);
        Ok(Self {
            params,
            hidden: h,
            out,
            state_dim,
            num_actions,
        })
    }

    /// Q values for each row of `states`: `[n × |A|]`.
    pub fn q_nodes(&self, g: &mut Graph<T>, p: &Bound<'_, T>, states: NodeId) -> Result<NodeId> {
        check_dim("Q-network input", self.state_dim, g.value(states).cols())?;
        let h = self.hidden.forward(g, p, states, Activation::Tanh)?;
        Ok(self.out.forward(g, p, h, Activation::Identity)?)
    }

    pub fn values_batch(&self, states: &[Vec<T>]) -> Result<Vec<Vec<T>>> {
        if states.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let p = g.bind(&self.params);
        let x = g.constant(Tensor::from_rows(states)?);
        let q = self.q_nodes(&mut g, &p, x)?;
        Ok(g.value(q).data().chunks(self.num_actions).map(<[T]>::to_vec).collect())
    }

    pub fn values(&self, state: &[T]) -> Result<Vec<T>> {
        Ok(self.values_batch(&[state.to_vec()])?.remove(0))
    }

    pub fn to_checkpoint(&self, ckpt: &mut Checkpoint) {
        ckpt.set_meta("qnet.state_dim", self.state_dim);
        ckpt.set_meta("qnet.hidden", self.hidden.output);
        ckpt.set_meta("qnet.num_actions", self.num_actions);
        self.params.export("qnet", ckpt);
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut q = Self::new(
            ckpt.meta_parse("qnet.state_dim")?,
            ckpt.meta_parse("qnet.hidden")?,
            ckpt.meta_parse("qnet.num_actions")?,
            &mut ChaCha8Rng::seed_from_u64(0),
        )?;
        q.params.import("qnet", ckpt)?;
        Ok(q)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn greedy<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn policy<T: Scalar>(q: &QNetwork<T>, state: &[T]) -> Result<usize> {
    Ok(greedy(&q.values(state)?))
}

/// `r` at terminals, otherwise `r + γ max_a' Q(s', a')`.
pub fn q_target<T: Scalar>(tuple: &TransitionTuple<T>, q: &QNetwork<T>, gamma: T) -> Result<T> {
    if tuple.terminal {
        return Ok(tuple.reward);
    }
    let next = q.values(&tuple.next)?;
    Ok(tuple.reward + gamma * next[greedy(&next)])
}

fn choose<T: Scalar, R: Rng + ?Sized>(values: &[T], epsilon: f64, rng: &mut R) -> usize {
    if rng.random::<f64>() < epsilon {
        rng.random_range(0..values.len())
    } else {
        greedy(values)
    }
}

fn explored_tuple<T: Scalar>(start: &ExploreStart<T>, action: usize, next: Vec<T>) -> TransitionTuple<T> {
    let (reward, terminal) = if action == start.action {
        (start.reward, start.terminal)
    } else {
        (-T::one(), true)
    };
    TransitionTuple {
        state: start.state.clone(),
        action,
        reward,
        next,
        terminal,
    }
}

/// Explores one decision from `start` with ε-greedy action choice.
pub fn explore<T: Scalar, R: Rng + ?Sized>(
    start: &ExploreStart<T>,
    q: &QNetwork<T>,
    transition: &TransitionFn<'_, T>,
    epsilon: f64,
    rng: &mut R,
) -> Result<TransitionTuple<T>> {
    Ok(explore_all(std::slice::from_ref(start), q, transition, epsilon, rng)?.remove(0))
}

/// [`explore`] for every start, with batched network evaluations.
pub fn explore_all<T: Scalar, R: Rng + ?Sized>(
    starts: &[ExploreStart<T>],
    q: &QNetwork<T>,
    transition: &TransitionFn<'_, T>,
    epsilon: f64,
    rng: &mut R,
) -> Result<Vec<TransitionTuple<T>>> {
    let states: Vec<Vec<T>> = starts.iter().map(|s| s.state.clone()).collect();
    let values = q.values_batch(&states)?;
    let actions: Vec<usize> = values.iter().map(|v| choose(v, epsilon, rng)).collect();
    let vectors: Vec<Vec<T>> = starts
        .iter()
        .zip(&actions)
        .map(|(s, &a)| {
            s.action_vectors
                .get(a)
                .cloned()
                .ok_or_else(|| invalid(format!("no phase vector for action {a}")))
        })
        .collect::<Result<_>>()?;
    let next = if states.is_empty() { Vec::new() } else { transition(&states, &vectors)? };
    check_dim("transition outputs", starts.len(), next.len())?;
    Ok(starts
        .iter()
        .zip(actions)
        .zip(next)
        .map(|((s, a), n)| explored_tuple(s, a, n))
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct QConfig {
    pub gamma: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub iterations: usize,
    pub minibatch: usize,
    pub hidden: usize,
    pub seed: u64,
    /// Off gives the ablation trained on ground-truth tuples only.
    pub explore: bool,
    pub clip_norm: f64,
    pub rho: f64,
    pub epsilon: f64,
}

impl Default for QConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            epsilon_start: 0.1,
            epsilon_end: 0.01,
            iterations: 300,
            minibatch: 32,
            hidden: 64,
            seed: 0,
            explore: true,
            clip_norm: 5.0,
            rho: 0.95,
            epsilon: 1e-6,
        }
    }
}

impl QConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(invalid(format!("gamma {} outside [0, 1)", self.gamma)));
        }
        for e in [self.epsilon_start, self.epsilon_end] {
            if !(0.0..=1.0).contains(&e) {
                return Err(invalid(format!("exploration rate {e} outside [0, 1]")));
            }
        }
        if self.minibatch == 0 || self.hidden == 0 {
            return Err(invalid("minibatch and hidden must be positive"));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) || !(self.epsilon > 0.0) || !(self.clip_norm > 0.0) {
            return Err(invalid("bad optimizer settings"));
        }
        Ok(())
    }

    /// Linear decay from `epsilon_start` to `epsilon_end` over the run.
    pub fn exploration_rate(&self, iteration: usize) -> f64 {
        if self.iterations <= 1 {
            return self.epsilon_start;
        }
        let f = iteration as f64 / (self.iterations - 1) as f64;
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * f
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QIteration {
    pub iteration: usize,
    pub td_loss: f64,
    pub greedy_match: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct QReport {
    pub iterations: Vec<QIteration>,
}

impl QReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,td_loss,greedy_match\n");
        for r in &self.iterations {
            out.push_str(&format!("{},{},{}\n", r.iteration, r.td_loss, r.greedy_match));
        }
        out
    }
}

/// Squared TD error summed over the batch, divided by its size.
fn td_step<T: Scalar>(q: &QNetwork<T>, batch: &[&TransitionTuple<T>], gamma: T) -> Result<(T, Vec<Tensor<T>>)> {
    let nexts: Vec<Vec<T>> = batch.iter().filter(|t| !t.terminal).map(|t| t.next.clone()).collect();
    let mut next_values = q.values_batch(&nexts)?.into_iter();
    let n = batch.len();
    let a = q.num_actions;
    let mut mask = vec![T::zero(); n * a];
    let mut target = vec![T::zero(); n * a];
    for (i, t) in batch.iter().enumerate() {
        if t.action >= a {
            return Err(invalid(format!("action {} outside Q outputs", t.action)));
        }
        let y = if t.terminal {
            t.reward
        } else {
            let v = next_values.next().expect("one value row per non-terminal");
            t.reward + gamma * v[greedy(&v)]
        };
        mask[i * a + t.action] = T::one();
        target[i * a + t.action] = y;
    }
    let states: Vec<Vec<T>> = batch.iter().map(|t| t.state.clone()).collect();
    let mut g = Graph::new();
    let p = g.bind(&q.params);
    let x = g.constant(Tensor::from_rows(&states)?);
    let values = q.q_nodes(&mut g, &p, x)?;
    let m = g.constant(Tensor::new(vec![n, a], mask)?);
    let y = g.constant(Tensor::new(vec![n, a], target)?);
    let picked = g.mul(values, m)?;
    let diff = g.sub(picked, y)?;
    let sq = g.square(diff)?;
    let total = g.sum(sq)?;
    let loss = g.scale(total, T::one() / T::lit(n as f64))?;
    let grads = g.backward(loss)?;
    Ok((g.scalar(loss), grads.params(&p)))
}

/// Fraction of starts where the greedy action equals the recorded one.
pub fn greedy_match_rate<T: Scalar>(q: &QNetwork<T>, starts: &[ExploreStart<T>]) -> Result<f64> {
    if starts.is_empty() {
        return Ok(0.0);
    }
    let states: Vec<Vec<T>> = starts.iter().map(|s| s.state.clone()).collect();
    let values = q.values_batch(&states)?;
    let hits = values.iter().zip(starts).filter(|(v, s)| greedy(v) == s.action).count();
    Ok(hits as f64 / starts.len() as f64)
}

/// Runs the Q-learning loop: per iteration, explore from every start (unless
/// disabled), then one shuffled pass of TD regression over the union.
pub fn train_q<T: Scalar>(
    dgt: &DgtSet<T>,
    transition: &TransitionFn<'_, T>,
    config: &QConfig,
) -> Result<(QNetwork<T>, QReport)> {
    config.validate()?;
    if dgt.tuples.is_empty() {
        return Err(invalid("no ground-truth tuples"));
    }
    if config.explore && dgt.starts.is_empty() {
        return Err(invalid("no success sequences to explore from"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let dim = dgt.tuples[0].state.len();
    let mut q = QNetwork::new(dim, config.hidden, NUM_DECISIONS, &mut rng)?;
    let mut opt = Adadelta::new(T::lit(config.rho), T::lit(config.epsilon));
    let gamma = T::lit(config.gamma);
    let mut report = QReport::default();
    for it in 0..config.iterations {
        let explored = if config.explore {
            explore_all(&dgt.starts, &q, transition, config.exploration_rate(it), &mut rng)?
        } else {
            Vec::new()
        };
        let mut pool: Vec<&TransitionTuple<T>> = dgt.tuples.iter().chain(&explored).collect();
        pool.shuffle(&mut rng);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for batch in pool.chunks(config.minibatch) {
            let (loss, mut grads) = td_step(&q, batch, gamma)?;
            clip_global_norm(&mut grads, T::lit(config.clip_norm));
            opt.step(&mut q.params, &grads, Direction::Minimize)?;
            loss_sum += loss.as_f64();
            batches += 1;
        }
        report.iterations.push(QIteration {
            iteration: it + 1,
            td_loss: loss_sum / batches as f64,
            greedy_match: greedy_match_rate(&q, &dgt.starts)?,
        });
    }
    Ok((q, report))
}
