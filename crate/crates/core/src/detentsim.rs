//! Detent-knob simulator: a knob turned through the plan phases, producing
//! tactile frames and reward labels.
//!
//! Frames are `(contact + click + wall) * contact_pattern + noise`, clipped to
//! [-1, 1]. The click is a half-cosine bump over the `detent_width` degrees
//! after each detent centre; the wall term is a plateau once the knob rests
//! on the upper wall. Rotation is always in the increasing-angle direction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sequence::{Decision, HapticSequence, Phase, OBS_DIM};

fn sim_err(msg: impl Into<String>) -> Error {
    Error::Sim(msg.into())
}

/// Default per-cell gains: a smooth blob over the 4 x 11 pad.
pub fn default_contact_pattern() -> Vec<f64> {
    (0..OBS_DIM)
        .map(|i| {
            let (r, c) = ((i / 11) as f64, (i % 11) as f64);
            let d2 = ((r - 1.5) / 2.0).powi(2) + ((c - 5.0) / 4.0).powi(2);
            0.15 + 0.35 * (-d2).exp()
        })
        .collect()
}

fn default_noise() -> f64 {
    0.02
}
fn default_stop_window() -> f64 {
    15.0
}
fn default_pre_rotation() -> usize {
    5
}
fn default_max_steps() -> usize {
    150
}
fn default_wall_plateau() -> f64 {
    0.6
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnobConfig {
    #[serde(default)]
    pub name: String,
    /// Detent centres in degrees.
    pub detent_angles: Vec<f64>,
    pub detent_width: f64,
    /// Lower and upper wall in degrees.
    pub wall_angles: [f64; 2],
    pub click_pulse_amplitude: f64,
    /// Degrees per rotation step.
    pub rotation_rate: f64,
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    #[serde(default = "default_contact_pattern")]
    pub contact_pattern: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
    /// Degrees past the first click in which stopping succeeds.
    #[serde(default = "default_stop_window")]
    pub stop_window: f64,
    /// Steps spent in the before-rotation phase before turning starts.
    #[serde(default = "default_pre_rotation")]
    pub pre_rotation_steps: usize,
    /// Start angle is drawn uniformly from ±start_jitter around zero.
    #[serde(default)]
    pub start_jitter: f64,
    /// Relative per-episode spread of the contact gain.
    #[serde(default)]
    pub contact_jitter: f64,
    #[serde(default = "default_wall_plateau")]
    pub wall_plateau_amplitude: f64,
    /// Episodes still running after this many steps fail.
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
}

/// Names accepted by [`KnobConfig::preset`].
pub const PRESETS: [&str; 3] = ["stirrer", "speaker", "fan"];

impl KnobConfig {
    pub fn preset(name: &str) -> Result<KnobConfig> {
        let base = KnobConfig {
            name: name.to_string(),
            detent_angles: vec![30.0],
            detent_width: 9.0,
            wall_angles: [-15.0, 75.0],
            click_pulse_amplitude: 0.45,
            rotation_rate: 1.5,
            noise_std: default_noise(),
            contact_pattern: default_contact_pattern(),
            seed: 0,
            stop_window: 15.0,
            pre_rotation_steps: default_pre_rotation(),
            start_jitter: 6.0,
            contact_jitter: 0.1,
            wall_plateau_amplitude: default_wall_plateau(),
            max_steps: default_max_steps(),
        };
        match name {
            "stirrer" => Ok(base),
            "speaker" => Ok(KnobConfig {
                detent_width: 6.0,
                click_pulse_amplitude: 0.35,
                contact_jitter: 0.1,
                ..base
            }),
            "fan" => Ok(KnobConfig {
                detent_angles: vec![45.0, 90.0],
                detent_width: 12.0,
                wall_angles: [-15.0, 110.0],
                rotation_rate: 2.5,
                stop_window: 20.0,
                ..base
            }),
            other => Err(Error::Config(format!(
                "unknown scenario '{other}' (expected one of {})",
                PRESETS.join(", ")
            ))),
        }
    }

    pub fn from_toml(text: &str) -> Result<KnobConfig> {
        let config: KnobConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("knob config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.wall_angles;
        let finite = [
            lo,
            hi,
            self.detent_width,
            self.click_pulse_amplitude,
            self.rotation_rate,
            self.noise_std,
            self.stop_window,
            self.start_jitter,
            self.contact_jitter,
            self.wall_plateau_amplitude,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("non-finite knob parameter".into()));
        }
        if lo >= hi {
            return Err(Error::Config(format!("walls [{lo}, {hi}] are not increasing")));
        }
        if self.detent_angles.is_empty() {
            return Err(Error::Config("no detent inside the walls".into()));
        }
        for &d in &self.detent_angles {
            if !(d > lo && d < hi) {
                return Err(Error::Config(format!("detent at {d} is not strictly inside walls [{lo}, {hi}]")));
            }
        }
        if self.detent_angles.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("detent angles must be increasing".into()));
        }
        if self.detent_width <= 0.0 {
            return Err(Error::Config("detent_width must be positive".into()));
        }
        if self.noise_std < 0.0 || self.start_jitter < 0.0 || self.stop_window < 0.0 {
            return Err(Error::Config("noise_std, start_jitter and stop_window must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.contact_jitter) {
            return Err(Error::Config("contact_jitter must lie in [0, 1)".into()));
        }
        if self.rotation_rate <= 0.0 {
            return Err(Error::Config("rotation_rate must be positive".into()));
        }
        if self.contact_pattern.len() != OBS_DIM || self.contact_pattern.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(format!("contact_pattern needs {OBS_DIM} finite gains")));
        }
        if self.start_jitter >= self.detent_angles[0] || -self.start_jitter <= lo {
            return Err(Error::Config("start range must lie between the lower wall and the first detent".into()));
        }
        if self.max_steps < 2 {
            return Err(Error::Config("max_steps must be at least 2".into()));
        }
        Ok(())
    }

    fn first_detent(&self) -> f64 {
        self.detent_angles[0]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Ongoing,
    Success,
    Failure,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimState {
    pub angle: f64,
    pub start_angle: f64,
    pub phase: Phase,
    /// Set once the first detent centre has been crossed.
    pub clicked: bool,
    pub click_angle: Option<f64>,
    pub hit_wall: bool,
    /// Contact dropout: the gripper no longer turns the knob.
    pub slipped: bool,
    pub contact_level: f64,
    pub contact_gain: f64,
    pub step_index: usize,
    pub outcome: Outcome,
}

impl SimState {
    /// Injects a contact dropout; later rotation steps leave the knob in place.
    pub fn slip(&mut self) {
        self.slipped = true;
    }

    pub fn is_terminal(&self) -> bool {
        self.outcome != Outcome::Ongoing
    }

    /// Degrees turned since the episode started.
    pub fn rotated(&self) -> f64 {
        self.angle - self.start_angle
    }

    /// True when advancing now would succeed.
    pub fn in_window(&self, config: &KnobConfig) -> bool {
        matches!(self.click_angle, Some(c) if self.angle - c <= config.stop_window)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub state: SimState,
    pub observation: Vec<f64>,
    pub reward: f64,
}

/// Noise-free click intensity at `angle`: a half-cosine lobe spanning
/// `detent_width` degrees past each detent centre.
fn click_level(angle: f64, config: &KnobConfig) -> f64 {
    config
        .detent_angles
        .iter()
        .map(|&c| {
            let u = (angle - c) / config.detent_width;
            if u > 0.0 && u < 1.0 {
                config.click_pulse_amplitude * (std::f64::consts::PI * u).sin()
            } else {
                0.0
            }
        })
        .sum()
}

/// Tactile frame for `state`.
pub fn observe<R: Rng + ?Sized>(state: &SimState, config: &KnobConfig, rng: &mut R) -> Result<Vec<f64>> {
    let mut level = state.contact_level * state.contact_gain;
    if !state.slipped {
        level += click_level(state.angle, config);
    }
    if state.hit_wall {
        level += config.wall_plateau_amplitude;
    }
    let noise = Normal::new(0.0, config.noise_std).map_err(|e| sim_err(e.to_string()))?;
    Ok(config
        .contact_pattern
        .iter()
        .map(|&g| {
            let n = if config.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
            (level * g + n).clamp(-1.0, 1.0)
        })
        .collect())
}

/// Starts an episode: grasped, before rotation, at a jittered start angle.
pub fn reset<R: Rng + ?Sized>(config: &KnobConfig, rng: &mut R) -> Result<(SimState, Vec<f64>)> {
    config.validate()?;
    let start = if config.start_jitter > 0.0 {
        rng.random_range(-config.start_jitter..=config.start_jitter)
    } else {
        0.0
    };
    let gain = if config.contact_jitter > 0.0 {
        1.0 + rng.random_range(-config.contact_jitter..=config.contact_jitter)
    } else {
        1.0
    };
    let state = SimState {
        angle: start,
        start_angle: start,
        phase: Phase::BeforeRotation,
        clicked: false,
        click_angle: None,
        hit_wall: false,
        slipped: false,
        contact_level: 1.0,
        contact_gain: gain,
        step_index: 0,
        outcome: Outcome::Ongoing,
    };
    let obs = observe(&state, config, rng)?;
    Ok((state, obs))
}

/// Advances the simulation by one control step.
pub fn step<R: Rng + ?Sized>(
    state: &SimState,
    decision: Decision,
    config: &KnobConfig,
    rng: &mut R,
) -> Result<StepOutput> {
    if state.is_terminal() {
        return Err(sim_err(format!("step after terminal outcome {:?}", state.outcome)));
    }
    if state.phase == Phase::Stopped {
        return Err(sim_err("step in the stopped phase"));
    }
    let mut next = state.clone();
    next.step_index += 1;
    let mut reward = 0.0;
    match (decision, state.phase) {
        (Decision::Advance, _) => {
            next.phase = Phase::Stopped;
            if state.in_window(config) {
                reward = 1.0;
                next.outcome = Outcome::Success;
            } else {
                reward = -1.0;
                next.outcome = Outcome::Failure;
            }
        }
        (Decision::Stay, Phase::BeforeRotation) => {
            if next.step_index >= config.pre_rotation_steps {
                next.phase = Phase::Rotation;
            }
        }
        (Decision::Stay, _) => {
            if state.slipped {
                next.contact_level *= 0.3;
            } else if state.hit_wall {
                reward = -1.0;
                next.outcome = Outcome::Failure;
            } else {
                let wall = config.wall_angles[1];
                let to = (state.angle + config.rotation_rate).min(wall);
                let first = config.first_detent();
                if !state.clicked && state.angle < first && first <= to {
                    next.clicked = true;
                    next.click_angle = Some(first);
                }
                next.angle = to;
                next.hit_wall = to >= wall;
            }
        }
    }
    if next.outcome == Outcome::Ongoing && next.step_index >= config.max_steps {
        reward = -1.0;
        next.outcome = Outcome::Failure;
    }
    let observation = observe(&next, config, rng)?;
    Ok(StepOutput {
        state: next,
        observation,
        reward,
    })
}

/// Closed-loop controller. `state` is the simulator's ground truth; learned
/// policies must only use `observation` and `phase`.
pub trait Policy {
    fn reset(&mut self) -> Result<()>;
    fn decide(&mut self, observation: &[f64], phase: Phase, state: &SimState) -> Result<Decision>;
}

/// Advances as soon as the click has been felt.
#[derive(Clone, Debug, Default)]
pub struct OraclePolicy;

impl Policy for OraclePolicy {
    fn reset(&mut self) -> Result<()> {
        Ok(())
    }

    fn decide(&mut self, _observation: &[f64], phase: Phase, state: &SimState) -> Result<Decision> {
        Ok(if phase == Phase::Rotation && state.clicked {
            Decision::Advance
        } else {
            Decision::Stay
        })
    }
}

/// Turns by a uniformly random amount in [0, upper wall - start], then stops.
#[derive(Clone, Debug)]
pub struct ChancePolicy {
    rng: ChaCha8Rng,
    upper_wall: f64,
    target: Option<f64>,
}

impl ChancePolicy {
    pub fn new(config: &KnobConfig, seed: u64) -> Self {
        ChancePolicy {
            rng: ChaCha8Rng::seed_from_u64(seed),
            upper_wall: config.wall_angles[1],
            target: None,
        }
    }
}

impl Policy for ChancePolicy {
    fn reset(&mut self) -> Result<()> {
        self.target = None;
        Ok(())
    }

    fn decide(&mut self, _observation: &[f64], phase: Phase, state: &SimState) -> Result<Decision> {
        if phase != Phase::Rotation {
            return Ok(Decision::Stay);
        }
        let target = match self.target {
            Some(t) => t,
            None => {
                let t = self.rng.random::<f64>() * (self.upper_wall - state.start_angle);
                self.target = Some(t);
                t
            }
        };
        Ok(if state.rotated() >= target {
            Decision::Advance
        } else {
            Decision::Stay
        })
    }
}


/// Exact success probability of [`ChancePolicy`] for an episode starting at
/// `start_angle`, enumerating the reachable stop points.
pub fn chance_success_probability(config: &KnobConfig, start_angle: f64) -> Result<f64> {
    config.validate()?;
    let wall = config.wall_angles[1];
    let range = wall - start_angle;
    let first = config.first_detent();
    // the policy stops at the first step whose rotation reaches the target,
    // so step k collects targets in (rotated(k-1), rotated(k)]
    let mut prob = 0.0;
    let mut prev = 0.0;
    let mut angle = start_angle;
    loop {
        let rotated = angle - start_angle;
        if angle >= first && angle - first <= config.stop_window {
            prob += (rotated - prev) / range;
        }
        if angle >= wall {
            break;
        }
        prev = rotated;
        angle = (angle + config.rotation_rate).min(wall);
    }
    Ok(prob)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub steps: usize,
    /// Step at which the stopped phase was entered, if it was.
    pub stop_step: Option<usize>,
    pub stop_angle: Option<f64>,
    pub outcome: Outcome,
    pub total_reward: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutReport {
    pub episodes: Vec<EpisodeLog>,
}

impl RolloutReport {
    pub fn successes(&self) -> usize {
        self.episodes.iter().filter(|e| e.outcome == Outcome::Success).count()
    }

    pub fn success_rate(&self) -> f64 {
        if self.episodes.is_empty() {
            return 0.0;
        }
        self.successes() as f64 / self.episodes.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("episode,steps,stop_step,stop_angle,outcome,total_reward\n");
        for e in &self.episodes {
            let opt = |v: Option<String>| v.unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.episode,
                e.steps,
                opt(e.stop_step.map(|s| s.to_string())),
                opt(e.stop_angle.map(|a| a.to_string())),
                match e.outcome {
                    Outcome::Ongoing => "ongoing",
                    Outcome::Success => "success",
                    Outcome::Failure => "failure",
                },
                e.total_reward
            ));
        }
        out
    }
}

/// Seed of episode `index` under master seed `seed`.
pub fn episode_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng.random()
}

/// Runs `n_episodes` closed-loop episodes. Episode `i` uses
/// [`episode_seed`]`(seed, i)`, so results do not depend on the policy's
/// internal randomness consuming simulator draws.
pub fn rollout_policy(
    policy: &mut dyn Policy,
    config: &KnobConfig,
    n_episodes: usize,
    seed: u64,
) -> Result<RolloutReport> {
    config.validate()?;
    let mut episodes = Vec::with_capacity(n_episodes);
    for episode in 0..n_episodes {
        let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(seed, episode));
        let (mut state, mut obs) = reset(config, &mut rng)?;
        policy.reset()?;
        let mut log = EpisodeLog {
            episode,
            steps: 0,
            stop_step: None,
            stop_angle: None,
            outcome: Outcome::Ongoing,
            total_reward: 0.0,
        };
        while !state.is_terminal() {
            let decision = policy.decide(&obs, state.phase, &state)?;
            let out = step(&state, decision, config, &mut rng)?;
            log.steps += 1;
            log.total_reward += out.reward;
            if out.state.phase == Phase::Stopped {
                log.stop_step = Some(log.steps);
                log.stop_angle = Some(out.state.angle);
            }
            state = out.state;
            obs = out.observation;
        }
        log.outcome = state.outcome;
        episodes.push(log);
    }
    Ok(RolloutReport { episodes })
}

/// Scripted controllers used to record demonstrations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Script {
    /// Stops a short reaction delay after the click.
    Success,
    /// Contact drops out before the detent; stops without a click.
    Slip,
    /// Keeps turning past the stoppable window, then stops.
    OverRotation,
    /// Turns into the wall and keeps pushing.
    WallGrinding,
    /// Stops before reaching the detent.
    Insufficient,
}

/// The four failure scripts in the order they are cycled.
pub const FAILURE_SCRIPTS: [Script; 4] = [Script::Slip, Script::OverRotation, Script::WallGrinding, Script::Insufficient];

/// Rotation steps the demonstrator takes to react to the click.
pub const REACTION_STEPS: usize = 2;

fn steps_to(from: f64, to: f64, rate: f64) -> usize {
    ((to - from) / rate).ceil().max(0.0) as usize
}

/// Records one episode driven by `script`.
pub fn run_script(config: &KnobConfig, script: Script, id: String, seed: u64) -> Result<HapticSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut state, obs) = reset(config, &mut rng)?;
    let rate = config.rotation_rate;
    let window_steps = (config.stop_window / rate).floor() as usize;
    let to_click = steps_to(state.start_angle, config.first_detent(), rate);
    // rotation steps after which the script advances; None keeps turning
    let stop_after: Option<usize> = match script {
        Script::Success => Some(to_click + REACTION_STEPS.min(window_steps)),
        Script::OverRotation => Some(to_click + window_steps + rng.random_range(1..=4)),
        Script::Insufficient => Some(rng.random_range(0..to_click.max(1))),
        Script::Slip => None,
        Script::WallGrinding => None,
    };
    let slip_at = match script {
        Script::Slip => Some(rng.random_range(0..to_click.max(1))),
        _ => None,
    };
    let slip_stop = rng.random_range(3..=6);

    let mut seq = HapticSequence {
        id,
        observations: vec![obs],
        actions: vec![state.phase.one_hot()],
        rewards: vec![0.0],
        success: false,
    };
    let mut rotation_steps = 0;
    let mut slipped_for = 0;
    while !state.is_terminal() {
        let mut decision = Decision::Stay;
        if state.phase == Phase::Rotation {
            if slip_at == Some(rotation_steps) && !state.slipped {
                state.slip();
            }
            if state.slipped {
                if slipped_for >= slip_stop {
                    decision = Decision::Advance;
                }
                slipped_for += 1;
            } else if let Some(n) = stop_after {
                if rotation_steps >= n || state.hit_wall {
                    decision = Decision::Advance;
                }
            }
            rotation_steps += 1;
        }
        let out = step(&state, decision, config, &mut rng)?;
        seq.observations.push(out.observation);
        seq.actions.push(out.state.phase.one_hot());
        seq.rewards.push(out.reward);
        state = out.state;
    }
    seq.success = state.outcome == Outcome::Success;
    Ok(seq)
}

/// `n_success` successful demonstrations followed by `n_fail` failures that
/// cycle through [`FAILURE_SCRIPTS`] in equal proportions.
pub fn generate_dataset(config: &KnobConfig, n_success: usize, n_fail: usize, seed: u64) -> Result<Vec<HapticSequence>> {
    if n_success == 0 || n_fail == 0 {
        return Err(Error::Config("generate_dataset needs at least one success and one failure".into()));
    }
    config.validate()?;
    let name = if config.name.is_empty() { "knob" } else { &config.name };
    let mut out = Vec::with_capacity(n_success + n_fail);
    for i in 0..n_success + n_fail {
        let script = if i < n_success {
            Script::Success
        } else {
            FAILURE_SCRIPTS[(i - n_success) % FAILURE_SCRIPTS.len()]
        };
        let seq = run_script(config, script, format!("{name}-{i:04}"), episode_seed(seed, i))?;
        if seq.success != (script == Script::Success) {
            return Err(sim_err(format!("script {script:?} ended with success = {}", seq.success)));
        }
        out.push(seq);
    }
    Ok(out)
}
