use std::collections::HashMap;

use haptiq_core::qcontrol::{
    build_dgt, explore, explore_all, greedy, greedy_match_rate, policy, q_target, train_q, DgtSet, ExploreStart,
    QConfig, QNetwork, TransitionFn, TransitionTuple,
};
use haptiq_core::recognition::{sample, PosteriorEncoder, RecConfig, RecognitionNet};
use haptiq_core::sequence::{HapticSequence, Phase};
use haptiq_core::Result;
use numkit::{Checkpoint, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Q-network whose outputs are the constant `values` for every input.
fn constant_q(dim: usize, values: &[f64]) -> QNetwork<f64> {
    let mut q = QNetwork::new(dim, 4, values.len(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    *q.params.get_mut(q.out.weight) = Tensor::zeros(&[4, values.len()]);
    *q.params.get_mut(q.out.bias) = Tensor::new(vec![values.len()], values.to_vec()).unwrap();
    q
}

fn shift_transition() -> Box<TransitionFn<'static, f64>> {
    Box::new(|states: &[Vec<f64>], actions: &[Vec<f64>]| -> Result<Vec<Vec<f64>>> {
        Ok(states
            .iter()
            .zip(actions)
            .map(|(s, a)| s.iter().enumerate().map(|(i, v)| 0.5 * v + a[i % a.len()]).collect())
            .collect())
    })
}

fn tuple(state: Vec<f64>, action: usize, reward: f64, next: Vec<f64>, terminal: bool) -> TransitionTuple<f64> {
    TransitionTuple {
        state,
        action,
        reward,
        next,
        terminal,
    }
}

#[test]
fn greedy_argmax_and_ties() {
    assert_eq!(greedy(&[0.1, 0.9, 0.3]), 1);
    assert_eq!(greedy(&[0.5, 0.5]), 0);
    assert_eq!(greedy(&[0.1 + 7.0, 0.9 + 7.0, 0.3 + 7.0]), 1);
    let q = constant_q(3, &[0.2, 0.7]);
    assert_eq!(policy(&q, &[0.0, 1.0, 2.0]).unwrap(), 1);
}

proptest! {
    #[test]
    fn greedy_invariant_under_positive_affine_maps(v in proptest::collection::vec(-10.0f64..10.0, 1..6), a in 0.01f64..100.0, b in -50.0f64..50.0) {
        let mapped: Vec<f64> = v.iter().map(|x| a * x + b).collect();
        // affine maps can merge nearly equal values through rounding; skip those
        let mut sorted = v.clone();
        sorted.sort_by(|x, y| y.partial_cmp(x).unwrap());
        prop_assume!(sorted.len() < 2 || sorted[0] - sorted[1] > 1e-9);
        prop_assert_eq!(greedy(&v), greedy(&mapped));
    }
}

#[test]
fn td_targets() {
    let q = constant_q(2, &[1.0, 0.25]);
    let terminal = tuple(vec![0.0, 0.0], 1, 1.0, vec![3.0, 3.0], true);
    assert_eq!(q_target(&terminal, &q, 0.99).unwrap(), 1.0);
    let cont = tuple(vec![0.0, 0.0], 0, 0.0, vec![3.0, 3.0], false);
    assert!((q_target(&cont, &q, 0.99).unwrap() - 0.99).abs() < 1e-12);
    let cont = tuple(vec![0.0, 0.0], 0, -1.0, vec![3.0, 3.0], false);
    assert_eq!(q_target(&cont, &q, 0.0).unwrap(), -1.0);
}

fn phase_sequence(id: &str, phases: &[Phase], rewards: &[f64], success: bool) -> HapticSequence {
    HapticSequence {
        id: id.into(),
        observations: phases.iter().enumerate().map(|(i, _)| vec![0.1 * i as f64 - 0.3; 44]).collect(),
        actions: phases.iter().map(|p| p.one_hot()).collect(),
        rewards: rewards.to_vec(),
        success,
    }
}

#[test]
fn ground_truth_tuples_follow_the_recording() {
    use Phase::*;
    let a = phase_sequence(
        "a",
        &[BeforeRotation, Rotation, Rotation, Rotation, Stopped],
        &[0.0, 0.0, 0.0, 0.0, 1.0],
        true,
    );
    let b = phase_sequence("b", &[Rotation, Rotation, Stopped], &[0.0, 0.0, -1.0], false);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let net = RecognitionNet::<f64>::new(
        RecConfig {
            hidden1: 8,
            hidden2: 8,
            latent_dim: 3,
            ..RecConfig::default()
        },
        &mut rng,
    )
    .unwrap();
    let zero_noise = |seq: &HapticSequence| -> Result<Vec<Vec<f64>>> {
        let post = net.encode(&seq.observations, &seq.actions)?;
        let noise = vec![vec![0.0; 3]; seq.len()];
        Ok(sample(&post, &noise)?.into_iter().map(|s| s.into_values()).collect())
    };
    let dgt = build_dgt(&[a.clone(), b.clone()], zero_noise).unwrap();
    assert_eq!(dgt.tuples.len(), (5 - 1) + (3 - 1));
    assert_eq!(dgt.starts.len(), 4);

    let post = net.encode(&a.observations, &a.actions).unwrap();
    for t in 0..4 {
        let tu = &dgt.tuples[t];
        assert_eq!(tu.state, post[t].mean());
        assert_eq!(tu.next, post[t + 1].mean());
        assert_eq!(tu.reward, a.rewards[t + 1]);
        assert_eq!(tu.terminal, t == 3);
        assert_eq!(tu.action, usize::from(t == 3));
    }
    assert_eq!(dgt.tuples[5].reward, -1.0);
    assert!(dgt.tuples[5].terminal && dgt.tuples[5].action == 1);
    // exploring "advance" from the rotation phase feeds the stopped phase vector
    assert_eq!(dgt.starts[1].action_vectors[1], Stopped.one_hot());
    assert_eq!(dgt.starts[1].action_vectors[0], Rotation.one_hot());
    assert_eq!(dgt.starts[3].action_vectors[0], Rotation.one_hot());

    let wrong_count = |_: &HapticSequence| -> Result<Vec<Vec<f64>>> { Ok(vec![vec![0.0; 3]]) };
    assert!(build_dgt(std::slice::from_ref(&a), wrong_count).is_err());
    let mut calls = 0;
    let ragged = |s: &HapticSequence| -> Result<Vec<Vec<f64>>> {
        calls += 1;
        Ok(vec![vec![0.0; if calls == 1 { 3 } else { 2 }]; s.len()])
    };
    assert!(build_dgt(&[a, b], ragged).is_err());
}

fn start(state: Vec<f64>, action: usize, reward: f64, terminal: bool) -> ExploreStart<f64> {
    ExploreStart {
        state,
        action,
        reward,
        terminal,
        action_vectors: vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]],
    }
}

#[test]
fn exploration_semantics() {
    let transition = shift_transition();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s = start(vec![0.4, -0.2, 1.0], 0, 0.0, false);

    // greedy picks the recorded action: recorded reward and terminal flag
    let prefers_stay = constant_q(3, &[1.0, 0.0]);
    let t = explore(&s, &prefers_stay, &*transition, 0.0, &mut rng).unwrap();
    assert_eq!((t.action, t.reward, t.terminal), (0, 0.0, false));
    assert_eq!(t.next, transition(std::slice::from_ref(&s.state), &s.action_vectors[0..1]).unwrap()[0]);

    // deviation: -1 and episode end
    let prefers_advance = constant_q(3, &[0.0, 1.0]);
    let t = explore(&s, &prefers_advance, &*transition, 0.0, &mut rng).unwrap();
    assert_eq!((t.action, t.reward, t.terminal), (1, -1.0, true));
    assert_eq!(t.next, transition(std::slice::from_ref(&s.state), &s.action_vectors[1..2]).unwrap()[0]);

    let win = start(vec![0.0, 0.0, 0.0], 1, 1.0, true);
    let t = explore(&win, &prefers_advance, &*transition, 0.0, &mut rng).unwrap();
    assert_eq!((t.action, t.reward, t.terminal), (1, 1.0, true));

    // ε = 1: uniform over both decisions regardless of Q
    let starts = vec![s.clone(); 20_000];
    let explored = explore_all(&starts, &prefers_stay, &*transition, 1.0, &mut rng).unwrap();
    let advances = explored.iter().filter(|t| t.action == 1).count() as f64 / starts.len() as f64;
    assert!((advances - 0.5).abs() < 3.0 * (0.25f64 / starts.len() as f64).sqrt() + 1e-3);
    assert!(explored.iter().all(|t| [-1.0, 0.0, 1.0].contains(&t.reward)));
}

#[test]
fn greedy_exploration_reproduces_recorded_rewards() {
    let transition = shift_transition();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let starts: Vec<ExploreStart<f64>> = (0..50)
        .map(|i| {
            let adv = i % 5 == 4;
            start(vec![if adv { 1.0 } else { -1.0 }, 0.0], usize::from(adv), if adv { 1.0 } else { 0.0 }, adv)
        })
        .collect();
    // Q prefers advance exactly when the first coordinate is positive
    let mut q = QNetwork::<f64>::new(2, 1, 2, &mut rng).unwrap();
    *q.params.get_mut(q.hidden.weight) = Tensor::new(vec![2, 1], vec![5.0, 0.0]).unwrap();
    *q.params.get_mut(q.hidden.bias) = Tensor::zeros(&[1]);
    *q.params.get_mut(q.out.weight) = Tensor::new(vec![1, 2], vec![-1.0, 1.0]).unwrap();
    *q.params.get_mut(q.out.bias) = Tensor::zeros(&[2]);
    let explored = explore_all(&starts, &q, &*transition, 0.0, &mut rng).unwrap();
    for (s, t) in starts.iter().zip(&explored) {
        assert_eq!(t.action, s.action);
        assert_eq!(t.reward, s.reward);
    }
    assert_eq!(greedy_match_rate(&q, &starts).unwrap(), 1.0);
}

fn quiet(iterations: usize, minibatch: usize, gamma: f64) -> QConfig {
    QConfig {
        gamma,
        iterations,
        minibatch,
        hidden: 16,
        explore: false,
        ..QConfig::default()
    }
}

#[test]
fn single_terminal_tuple_regresses_to_its_reward() {
    let dgt = DgtSet {
        tuples: vec![tuple(vec![0.3, -0.7], 1, 1.0, vec![0.0, 0.0], true)],
        starts: Vec::new(),
    };
    let (q, report) = train_q(&dgt, &*shift_transition(), &quiet(3000, 1, 0.99)).unwrap();
    let v = q.values(&[0.3, -0.7]).unwrap();
    assert!((v[1] - 1.0).abs() < 1e-2, "Q = {v:?}");
    assert!(report.iterations.last().unwrap().td_loss < 1e-4);
}

/// Exact Q by value iteration on the deterministic MDP the tuples describe.
fn value_iteration(tuples: &[TransitionTuple<f64>], gamma: f64) -> HashMap<(String, usize), f64> {
    let key = |s: &[f64]| format!("{s:?}");
    let mut q: HashMap<(String, usize), f64> = tuples.iter().map(|t| ((key(&t.state), t.action), 0.0)).collect();
    for _ in 0..1000 {
        let prev = q.clone();
        for t in tuples {
            let boot = if t.terminal {
                0.0
            } else {
                (0..2)
                    .filter_map(|a| prev.get(&(key(&t.next), a)))
                    .cloned()
                    .fold(f64::NEG_INFINITY, f64::max)
            };
            q.insert((key(&t.state), t.action), t.reward + gamma * boot);
        }
    }
    q
}

#[test]
fn two_state_chain_matches_value_iteration() {
    let a = vec![1.0, 0.0];
    let b = vec![0.0, 1.0];
    let tuples = vec![
        tuple(a.clone(), 0, 0.0, b.clone(), false),
        tuple(a.clone(), 1, 0.0, a.clone(), true),
        tuple(b.clone(), 1, 1.0, b.clone(), true),
        tuple(b.clone(), 0, 0.0, b.clone(), true),
    ];
    let exact = value_iteration(&tuples, 0.9);
    assert!((exact[&(format!("{a:?}"), 0)] - 0.9).abs() < 1e-12);
    let dgt = DgtSet {
        tuples: tuples.clone(),
        starts: Vec::new(),
    };
    let (q, _) = train_q(&dgt, &*shift_transition(), &quiet(3000, 4, 0.9)).unwrap();
    for s in [&a, &b] {
        let v = q.values(s).unwrap();
        for act in 0..2 {
            let want = exact[&(format!("{s:?}"), act)];
            assert!((v[act] - want).abs() < 5e-2, "state {s:?} action {act}: {} vs {want}", v[act]);
        }
    }
}

#[test]
fn deviation_penalty_teaches_the_recorded_action() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut tuples = Vec::new();
    let mut starts = Vec::new();
    for _ in 0..200 {
        let s: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let adv = s[0] + 0.5 * s[1] > 0.0;
        let action = usize::from(adv);
        let reward = if adv { 1.0 } else { 0.0 };
        let next: Vec<f64> = s.iter().map(|v| 0.9 * v).collect();
        tuples.push(tuple(s.clone(), action, reward, next, true));
        starts.push(ExploreStart {
            state: s,
            action,
            reward,
            terminal: true,
            action_vectors: vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]],
        });
    }
    let dgt = DgtSet { tuples, starts };
    let config = QConfig {
        iterations: 150,
        seed: 11,
        ..QConfig::default()
    };
    let (q, report) = train_q(&dgt, &*shift_transition(), &config).unwrap();
    let rate = greedy_match_rate(&q, &dgt.starts).unwrap();
    assert!(rate >= 0.95, "greedy match {rate}");
    assert!(report.to_csv().starts_with("iteration,td_loss,greedy_match\n"));
    assert_eq!(report.iterations.len(), 150);

    let (q2, report2) = train_q(&dgt, &*shift_transition(), &config).unwrap();
    assert_eq!(report, report2);
    assert_eq!(q.params.flatten(), q2.params.flatten());
}

#[test]
fn exploration_needs_success_states() {
    let dgt = DgtSet {
        tuples: vec![tuple(vec![0.0], 0, 0.0, vec![0.0], true)],
        starts: Vec::new(),
    };
    assert!(train_q(&dgt, &*shift_transition(), &QConfig::default()).is_err());
    let empty = DgtSet::<f64>::default();
    assert!(train_q(&empty, &*shift_transition(), &quiet(1, 1, 0.9)).is_err());
}

#[test]
fn checkpoint_round_trip() {
    let q = QNetwork::<f64>::new(5, 7, 2, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let mut ck = Checkpoint::new();
    q.to_checkpoint(&mut ck);
    let back = QNetwork::<f64>::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap();
    let s = [0.1, 0.2, -0.3, 0.4, 0.0];
    assert_eq!(back.values(&s).unwrap(), q.values(&s).unwrap());
}
