use haptiq_core::detentsim::{
    chance_success_probability, default_contact_pattern, generate_dataset, reset, rollout_policy, run_script, step,
    ChancePolicy, KnobConfig, OraclePolicy, Outcome, Policy, Script, SimState, PRESETS,
};
use haptiq_core::sequence::{Decision, Phase};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn quiet(name: &str) -> KnobConfig {
    KnobConfig {
        noise_std: 0.0,
        start_jitter: 0.0,
        contact_jitter: 0.0,
        ..KnobConfig::preset(name).unwrap()
    }
}

/// Steps with `decision` until `until` holds, returning the last output.
fn drive(config: &KnobConfig, state: SimState, until: impl Fn(&SimState) -> bool) -> SimState {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut s = state;
    while !until(&s) {
        s = step(&s, Decision::Stay, config, &mut rng).unwrap().state;
        assert!(!s.is_terminal());
    }
    s
}

#[test]
fn quiescent_contact_is_the_pattern() {
    let config = quiet("stirrer");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (s0, obs) = reset(&config, &mut rng).unwrap();
    assert_eq!(obs, default_contact_pattern());
    let out = step(&s0, Decision::Stay, &config, &mut rng).unwrap();
    assert_eq!(out.reward, 0.0);
    assert_eq!(out.observation, config.contact_pattern);
    // mid-rotation, far from the detent and the walls
    let s = drive(&config, out.state, |s| s.phase == Phase::Rotation && s.angle >= 9.0);
    let out = step(&s, Decision::Stay, &config, &mut rng).unwrap();
    assert_eq!(out.reward, 0.0);
    assert_eq!(out.observation, config.contact_pattern);
}

#[test]
fn click_then_stop_succeeds() {
    let config = quiet("stirrer");
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (s0, _) = reset(&config, &mut rng).unwrap();
    let s = drive(&config, s0, |s| s.clicked);
    assert_eq!(s.click_angle, Some(30.0));
    assert_eq!(s.angle, 30.0);
    let s = drive(&config, s, |s| s.angle >= 36.0);
    let out = step(&s, Decision::Advance, &config, &mut rng).unwrap();
    assert_eq!((out.reward, out.state.outcome, out.state.phase), (1.0, Outcome::Success, Phase::Stopped));
    assert!(step(&out.state, Decision::Stay, &config, &mut rng).is_err());
}

#[test]
fn click_is_a_bump_over_the_detent_width() {
    let config = quiet("stirrer");
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (s0, _) = reset(&config, &mut rng).unwrap();
    let mut s = s0;
    let mut peak = (0.0, 0.0);
    let mut bumped = Vec::new();
    while s.angle < 45.0 {
        let out = step(&s, Decision::Stay, &config, &mut rng).unwrap();
        let level = out.observation[0] / config.contact_pattern[0] - 1.0;
        if level > 1e-12 {
            bumped.push(out.state.angle);
        }
        if level > peak.1 {
            peak = (out.state.angle, level);
        }
        s = out.state;
    }
    // lobe over (30, 39): peak at 34.5, 1.5 deg steps land on five interior points
    assert_eq!(peak.0, 34.5);
    assert!((peak.1 - config.click_pulse_amplitude).abs() < 1e-12);
    assert!(bumped.iter().all(|a| *a > 30.0 && *a < 30.0 + config.detent_width));
    assert_eq!(bumped.len(), 5);
}

#[test]
fn early_stop_and_wall_grinding_fail() {
    let config = quiet("stirrer");
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (s0, _) = reset(&config, &mut rng).unwrap();
    let out = step(&s0, Decision::Advance, &config, &mut rng).unwrap();
    assert_eq!((out.reward, out.state.outcome), (-1.0, Outcome::Failure));

    let s = drive(&config, s0.clone(), |s| s.phase == Phase::Rotation && s.angle >= 20.0);
    let out = step(&s, Decision::Advance, &config, &mut rng).unwrap();
    assert_eq!((out.reward, out.state.outcome), (-1.0, Outcome::Failure));

    let s = drive(&config, s0.clone(), |s| s.angle > 45.0);
    let out = step(&s, Decision::Advance, &config, &mut rng).unwrap();
    assert_eq!(out.reward, -1.0);

    let s = drive(&config, s0, |s| s.hit_wall);
    assert_eq!(s.angle, 75.0);
    let wall_frame = haptiq_core::detentsim::observe(&s, &config, &mut rng).unwrap();
    let plateau = 1.0 + config.wall_plateau_amplitude;
    assert!((wall_frame[0] - plateau * config.contact_pattern[0]).abs() < 1e-12);
    let out = step(&s, Decision::Stay, &config, &mut rng).unwrap();
    assert_eq!((out.reward, out.state.outcome), (-1.0, Outcome::Failure));
    assert_eq!(out.state.angle, 75.0);
}

#[test]
fn fan_second_click_is_past_the_window() {
    let config = quiet("fan");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (s0, _) = reset(&config, &mut rng).unwrap();
    let s = drive(&config, s0.clone(), |s| s.angle >= 60.0);
    assert_eq!(step(&s, Decision::Advance, &config, &mut rng).unwrap().reward, 1.0);
    let s = drive(&config, s0, |s| s.angle >= 90.0);
    let out = step(&s, Decision::Advance, &config, &mut rng).unwrap();
    assert_eq!((out.reward, out.state.outcome), (-1.0, Outcome::Failure));
}

#[test]
fn infeasible_configs_are_rejected() {
    let base = KnobConfig::preset("stirrer").unwrap();
    let bad = [
        KnobConfig {
            detent_angles: vec![],
            ..base.clone()
        },
        KnobConfig {
            detent_angles: vec![80.0],
            ..base.clone()
        },
        KnobConfig {
            detent_angles: vec![75.0],
            ..base.clone()
        },
        KnobConfig {
            detent_width: 0.0,
            ..base.clone()
        },
        KnobConfig {
            noise_std: -0.1,
            ..base.clone()
        },
        KnobConfig {
            contact_pattern: vec![0.5; 10],
            ..base.clone()
        },
    ];
    for config in &bad {
        assert!(config.validate().is_err(), "{config:?}");
        assert!(generate_dataset(config, 2, 2, 0).is_err());
    }
    assert!(KnobConfig::preset("doorknob").is_err());
    assert!(generate_dataset(&base, 0, 3, 0).is_err());
}

#[test]
fn presets_round_trip_through_toml() {
    for name in PRESETS {
        let config = KnobConfig::preset(name).unwrap();
        config.validate().unwrap();
        assert_eq!(KnobConfig::from_toml(&config.to_toml()).unwrap(), config);
    }
    let minimal = "detent_angles = [20.0]\ndetent_width = 4.0\nwall_angles = [-10.0, 50.0]\n\
                   click_pulse_amplitude = 0.3\nrotation_rate = 2.0\n";
    let config = KnobConfig::from_toml(minimal).unwrap();
    assert_eq!(config.contact_pattern, default_contact_pattern());
    assert!(KnobConfig::from_toml("detent_angles = [20.0]\nbogus = 1\n").is_err());
}

#[test]
fn oracle_always_succeeds_without_noise() {
    for name in PRESETS {
        let config = KnobConfig {
            noise_std: 0.0,
            ..KnobConfig::preset(name).unwrap()
        };
        let report = rollout_policy(&mut OraclePolicy, &config, 50, 9).unwrap();
        assert_eq!(report.success_rate(), 1.0, "{name}");
    }
}

#[test]
fn chance_matches_the_window_fraction() {
    // stirrer from 0 deg: stops at 30..45 deg are stoppable, which the
    // uniform target reaches for targets in (28.5, 45] out of [0, 75]
    let stirrer = quiet("stirrer");
    let exact = chance_success_probability(&stirrer, 0.0).unwrap();
    assert!((exact - 16.5 / 75.0).abs() < 1e-12);
    // fan: stops at 45..65 deg, targets in (42.5, 65] out of [0, 110]
    let fan = quiet("fan");
    assert!((chance_success_probability(&fan, 0.0).unwrap() - 22.5 / 110.0).abs() < 1e-12);

    for (config, p) in [(stirrer, 16.5 / 75.0), (fan, 22.5 / 110.0)] {
        let n = 20_000;
        let report = rollout_policy(&mut ChancePolicy::new(&config, 3), &config, n, 4).unwrap();
        let sd = (p * (1.0 - p) / n as f64).sqrt();
        assert!((report.success_rate() - p).abs() < 4.0 * sd, "{} vs {p}", report.success_rate());
    }
    let oracle = rollout_policy(&mut OraclePolicy, &quiet("stirrer"), 200, 4).unwrap();
    assert!(oracle.success_rate() > 0.22 + 0.5);
}

#[test]
fn generated_dataset_contract() {
    let config = KnobConfig::preset("stirrer").unwrap();
    let data = generate_dataset(&config, 25, 25, 7).unwrap();
    assert_eq!(data.len(), 50);
    assert_eq!(data.iter().filter(|s| s.success).count(), 25);
    for seq in &data {
        seq.validate().unwrap();
        assert!(seq.observations.iter().flatten().all(|v| (-1.0..=1.0).contains(v)));
        // outcome success iff exactly one +1 and no -1 after it
        let plus: Vec<usize> = (0..seq.len()).filter(|&t| seq.rewards[t] == 1.0).collect();
        let consistent = plus.len() == 1 && seq.rewards[plus[0]..].iter().all(|&r| r != -1.0);
        assert_eq!(seq.success, consistent, "{}", seq.id);
        assert!(seq.len() >= 10 && seq.len() <= 80, "{} has length {}", seq.id, seq.len());
    }
    let again = generate_dataset(&config, 25, 25, 7).unwrap();
    assert_eq!(serde_json::to_string(&data).unwrap(), serde_json::to_string(&again).unwrap());
    let other = generate_dataset(&config, 25, 25, 8).unwrap();
    assert_ne!(data, other);
}

#[test]
fn every_failure_script_fails() {
    for name in PRESETS {
        let config = KnobConfig::preset(name).unwrap();
        for (i, script) in [Script::Slip, Script::OverRotation, Script::WallGrinding, Script::Insufficient]
            .into_iter()
            .enumerate()
        {
            for seed in 0..20 {
                let seq = run_script(&config, script, format!("{i}"), seed).unwrap();
                assert!(!seq.success, "{name} {script:?} seed {seed}");
                assert_eq!(*seq.rewards.last().unwrap(), -1.0);
            }
        }
        for seed in 0..20 {
            assert!(run_script(&config, Script::Success, "s".into(), seed).unwrap().success);
        }
    }
}

#[test]
fn noise_free_steps_are_pure() {
    let config = quiet("speaker");
    let (s0, _) = reset(&config, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let s = drive(&config, s0, |s| s.angle >= 27.0);
    for d in [Decision::Stay, Decision::Advance] {
        let a = step(&s, d, &config, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = step(&s, d, &config, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
    }
}

/// Advances with a fixed per-step probability once rotating.
struct Coin(ChaCha8Rng, f64);

impl Policy for Coin {
    fn reset(&mut self) -> haptiq_core::Result<()> {
        Ok(())
    }
    fn decide(&mut self, _: &[f64], phase: Phase, _: &SimState) -> haptiq_core::Result<Decision> {
        Ok(if phase == Phase::Rotation && self.0.random::<f64>() < self.1 {
            Decision::Advance
        } else {
            Decision::Stay
        })
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn frames_bounded_and_state_invariants_hold(
        amp in 0.0f64..3.0,
        plateau in 0.0f64..3.0,
        noise in 0.0f64..1.0,
        rate in 0.3f64..6.0,
        width in 0.5f64..20.0,
        p in 0.0f64..0.2,
        seed in 0u64..1000,
    ) {
        let config = KnobConfig {
            click_pulse_amplitude: amp,
            wall_plateau_amplitude: plateau,
            noise_std: noise,
            rotation_rate: rate,
            detent_width: width,
            ..KnobConfig::preset("stirrer").unwrap()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut policy = Coin(ChaCha8Rng::seed_from_u64(seed + 1), p);
        for _ in 0..3 {
            let (mut s, obs) = reset(&config, &mut rng).unwrap();
            prop_assert!(obs.iter().all(|v| (-1.0..=1.0).contains(v)));
            let mut plus = 0;
            while !s.is_terminal() {
                let d = policy.decide(&[], s.phase, &s).unwrap();
                let out = step(&s, d, &config, &mut rng).unwrap();
                prop_assert!(out.observation.iter().all(|v| (-1.0..=1.0).contains(v)));
                prop_assert!(out.state.angle >= config.wall_angles[0] && out.state.angle <= config.wall_angles[1]);
                prop_assert!(out.state.angle >= s.angle);
                prop_assert!([-1.0, 0.0, 1.0].contains(&out.reward));
                if out.reward == 1.0 {
                    plus += 1;
                }
                s = out.state;
            }
            prop_assert_eq!(s.outcome == Outcome::Success, plus == 1);
        }
    }
}
