use nalgebra::{Unit, UnitQuaternion, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tdk_core::env::{
    apply_action, numerical_angular_velocity, rotation_term, EnvConfig, HandEnv, Task, VecEnv,
};
use tdk_core::estimator::{ekf_init, ekf_predict, ekf_step, ekf_update, NoiseConfig};
use tdk_core::handmodel::{builtin_proto0, builtin_proto0_text, load_hand_model, HandModel};
use tdk_core::kinematics::{fingertip_velocities, forward_kinematics, rolling_joint_transform};
use tdk_core::rl::{normalize_advantages, Mlp, Trainer, TrainConfig};
use tdk_core::runtime::{
    control_step, ControlLoopConfig, ControlState, DriverError, MotorDriver, MotorState, Policy,
};
use tdk_core::tendon::{
    calibrate, joints_to_motor_angles, motor_angles_to_tendon_lengths, muscle_jacobian, tendon_lengths,
    TendonLengths,
};

fn proto() -> &'static HandModel {
    static MODEL: std::sync::OnceLock<HandModel> = std::sync::OnceLock::new();
    MODEL.get_or_init(builtin_proto0)
}

fn pose_strategy() -> impl Strategy<Value = Vec<f64>> {
    let ranges = proto().actuated_ranges();
    ranges.into_iter().map(|(lo, hi)| lo..=hi).collect::<Vec<_>>()
}

#[test]
fn layout_counts() {
    let m = proto();
    let spec = m.spec();
    assert_eq!(spec.joints.len() - spec.couplings.len(), m.n_actuated());
    let attachments: usize = spec.motors.iter().map(|mo| mo.attachments.len()).sum();
    assert_eq!(attachments, 22);
    assert_eq!(spec.motors.iter().filter(|mo| mo.attachments.len() == 2).count(), 6);
}

#[test]
fn schema_round_trip() {
    let m = load_hand_model(builtin_proto0_text()).unwrap();
    let again = load_hand_model(&m.to_toml().unwrap()).unwrap();
    assert_eq!(again.spec(), m.spec());
}

#[test]
fn flexor_terms_lengthen_tendons() {
    let m = proto();
    let sources = m.joint_sources();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ranges = m.actuated_ranges();
    for _ in 0..50 {
        let q: Vec<f64> = ranges.iter().map(|&(lo, hi)| rng.random_range(lo..=hi)).collect();
        let j = muscle_jacobian(m, &q).unwrap().0;
        for (k, motor) in m.motors().iter().enumerate() {
            let t = &m.tendons()[motor.primary().tendon];
            for a in 0..m.n_actuated() {
                let signs: Vec<f64> = t
                    .terms
                    .iter()
                    .filter(|term| sources[term.joint].actuated == a)
                    .map(|term| term.sign)
                    .collect();
                if !signs.is_empty() && signs.iter().all(|&s| s > 0.0) {
                    assert!(j[(k, a)] > 0.0, "motor {k} joint {a}: {}", j[(k, a)]);
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rolling_angle_is_abs_q(q in -std::f64::consts::PI..=std::f64::consts::PI, ax in 0usize..3) {
        let axis = Unit::new_normalize(Vector3::ith(ax, 1.0));
        let t = rolling_joint_transform(q, &axis, 0.01);
        prop_assert!((t.rotation_angle() - q.abs()).abs() < 1e-9);
    }

    #[test]
    fn rolling_transform_continuous_at_zero(eps in 1e-9f64..1e-6) {
        let axis = Unit::new_normalize(Vector3::new(1.0, 0.0, 0.0));
        let a = rolling_joint_transform(-eps, &axis, 0.01);
        let b = rolling_joint_transform(eps, &axis, 0.01);
        prop_assert!((a.translation - b.translation).norm() < 1e-5);
        prop_assert!(a.rotation.angle_to(&b.rotation) < 1e-5);
    }

    #[test]
    fn fk_is_pure(q in pose_strategy()) {
        prop_assert_eq!(forward_kinematics(proto(), &q).unwrap(), forward_kinematics(proto(), &q).unwrap());
    }

    #[test]
    fn tip_velocity_matches_pose_differences(q in pose_strategy(), seed in 0u64..1000) {
        let m = proto();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let qd: Vec<f64> = (0..11).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h = 1e-5;
        let plus: Vec<f64> = q.iter().zip(&qd).map(|(a, b)| a + h * b).collect();
        let minus: Vec<f64> = q.iter().zip(&qd).map(|(a, b)| a - h * b).collect();
        let (p, mi) = (forward_kinematics(m, &plus).unwrap(), forward_kinematics(m, &minus).unwrap());
        let v = fingertip_velocities(m, &q, &qd).unwrap();
        for (i, tip) in v.iter().enumerate() {
            let fd = (p[i].translation - mi[i].translation) / (2.0 * h);
            let scale = fd.norm().max(1e-3);
            prop_assert!((tip.linear - fd).norm() / scale < 1e-5, "tip {}: {} vs {}", i, tip.linear, fd);
        }
    }

    #[test]
    fn motor_round_trip_reproduces_lengths(q in pose_strategy(), offset in -3.0f64..3.0) {
        let m = proto();
        let q0 = vec![0.0; 11];
        let cal = calibrate(m, &[offset; 16], &q0).unwrap();
        let theta = joints_to_motor_angles(m, &cal, &q).unwrap();
        let l = motor_angles_to_tendon_lengths(m, &cal, &theta, None).unwrap().l;
        let f = tendon_lengths(m, &q).unwrap().l;
        for (a, b) in l.iter().zip(&f) {
            prop_assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn lengths_do_not_depend_on_motor_zero(q in pose_strategy(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let m = proto();
        let q0 = vec![0.0; 11];
        let ca = calibrate(m, &[a; 16], &q0).unwrap();
        let cb = calibrate(m, &[b; 16], &q0).unwrap();
        let la = motor_angles_to_tendon_lengths(m, &ca, &joints_to_motor_angles(m, &ca, &q).unwrap(), None).unwrap().l;
        let lb = motor_angles_to_tendon_lengths(m, &cb, &joints_to_motor_angles(m, &cb, &q).unwrap(), None).unwrap().l;
        for (x, y) in la.iter().zip(&lb) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn covariance_stays_symmetric(seed in 0u64..10_000, steps in 1usize..20) {
        let m = proto();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ekf_init(m, &[0.1; 11], 1e-2, &NoiseConfig::default(), 0.05).unwrap();
        for _ in 0..steps {
            if rng.random_bool(0.3) {
                s = ekf_predict(&s);
                continue;
            }
            let q: Vec<f64> = (0..11).map(|_| rng.random_range(-0.2..0.8)).collect();
            let z = TendonLengths {
                l: tendon_lengths(m, &q).unwrap().l,
                ldot: Some((0..16).map(|_| rng.random_range(-1e-2..1e-2)).collect()),
            };
            s = ekf_update(&s, &z, m).unwrap();
            prop_assert_eq!(s.x.len(), 22);
            prop_assert!((&s.p - s.p.transpose()).amax() <= 1e-9);
        }
    }

    #[test]
    fn actions_respect_rate_and_limits(
        start in pose_strategy(),
        actions in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 11), 1..30),
    ) {
        let ranges = proto().actuated_ranges();
        let mut qbar = start;
        for a in &actions {
            let prev = qbar.clone();
            apply_action(&mut qbar, a, &ranges, 5.0, 0.05);
            for j in 0..11 {
                prop_assert!(ranges[j].0 <= qbar[j] && qbar[j] <= ranges[j].1);
                prop_assert!((qbar[j] - prev[j]).abs() <= 0.25 + 1e-12);
            }
        }
    }

    #[test]
    fn rotation_term_bounded_and_symmetric(w in -100.0f64..100.0) {
        prop_assert!(rotation_term(w, 1.0) <= 2.0);
        prop_assert_eq!(rotation_term(w, 1.0), rotation_term(-w, -1.0));
    }

    #[test]
    fn fixed_axis_rate_recovered(
        ax in prop::array::uniform3(-1.0f64..1.0),
        rate in -50.0f64..50.0,
        start in prop::array::uniform3(-3.0f64..3.0),
    ) {
        let dt = 0.05;
        prop_assume!(Vector3::from(ax).norm() > 0.1 && (rate * dt).abs() < std::f64::consts::PI - 1e-3);
        let axis = Unit::new_normalize(Vector3::from(ax));
        let q0 = UnitQuaternion::from_scaled_axis(Vector3::from(start));
        let q1 = UnitQuaternion::from_axis_angle(&axis, rate * dt) * q0;
        let w = numerical_angular_velocity(&q0, &q1, dt).unwrap();
        prop_assert!((w - axis.into_inner() * rate).norm() < 1e-9);
    }

    #[test]
    fn normalized_advantages_have_unit_moments(v in prop::collection::vec(-100.0f64..100.0, 2..200)) {
        let mut a = v.clone();
        prop_assume!(v.iter().any(|x| (x - v[0]).abs() > 1e-3));
        normalize_advantages(&mut a);
        let n = a.len() as f64;
        let mean = a.iter().sum::<f64>() / n;
        let std = (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        prop_assert!(mean.abs() < 1e-9);
        prop_assert!((std - 1.0).abs() < 1e-6);
    }
}

#[test]
fn exact_filter_converges_on_still_pose() {
    let m = proto();
    let noise = NoiseConfig {
        q_pos: 0.0,
        q_vel: 1e-10,
        r_len: 1e-14,
        r_rate: 1e-14,
        exact_jacobian: true,
    };
    let q_true = vec![0.35; 11];
    let z = TendonLengths {
        l: tendon_lengths(m, &q_true).unwrap().l,
        ldot: Some(vec![0.0; 16]),
    };
    let start: Vec<f64> = q_true.iter().map(|q| q - 0.05).collect();
    let mut s = ekf_init(m, &start, 1e-2, &noise, 0.05).unwrap();
    for _ in 0..50 {
        s = ekf_step(&s, &z, m).unwrap();
    }
    for (a, b) in s.q().iter().zip(&q_true) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn filter_is_deterministic() {
    let m = proto();
    let run = || {
        let mut s = ekf_init(m, &[0.0; 11], 1e-2, &NoiseConfig::default(), 0.05).unwrap();
        for i in 0..30 {
            let q = vec![0.01 * i as f64; 11];
            let z = TendonLengths {
                l: tendon_lengths(m, &q).unwrap().l,
                ldot: Some(vec![1e-4; 16]),
            };
            s = ekf_step(&s, &z, m).unwrap();
        }
        s
    };
    assert_eq!(run(), run());
}

#[test]
fn reward_identity_along_rollouts() {
    let env = HandEnv::new(proto().clone(), EnvConfig::default()).unwrap();
    let mut venv = VecEnv::new(env.clone(), 4, 21);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..200 {
        let actions: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..11).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let outs = venv.step(&actions).unwrap();
        for (o, a) in outs.iter().zip(&actions) {
            let r = &o.reward;
            let want = 0.01 * r.rotation - 0.02 * r.torque - 0.002 * r.action - r.drop;
            assert!((r.total - want).abs() < 1e-12);
            let a_n = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((r.action - a_n).abs() < 1e-12);
        }
    }
}

#[test]
fn parallel_equals_serial_for_several_seeds() {
    let env = HandEnv::new(proto().clone(), EnvConfig::default()).unwrap();
    for seed in [0, 1, 99] {
        let mut a = VecEnv::new(env.clone(), 8, seed);
        let mut b = a.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..60 {
            let actions: Vec<Vec<f64>> = (0..8)
                .map(|_| (0..11).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            assert_eq!(a.step(&actions).unwrap(), b.step_serial(&actions).unwrap());
        }
    }
}

fn small_trainer() -> Trainer {
    let m = proto().clone();
    let env_cfg = EnvConfig {
        domain_randomization: false,
        task: Task::JointTracking { target: m.rest_pose() },
        episode_length: 16,
        ..EnvConfig::default()
    };
    let cfg = TrainConfig {
        num_envs: 4,
        rollout_len: 8,
        minibatch_size: 16,
        epochs: 2,
        actor_hidden: vec![16],
        critic_hidden: vec![16],
        seed: 5,
        ..TrainConfig::default()
    };
    Trainer::new(HandEnv::new(m, env_cfg).unwrap(), cfg).unwrap()
}

#[test]
fn first_pass_ratio_is_one_and_clip_fraction_bounded() {
    let mut t = small_trainer();
    for _ in 0..3 {
        let (_, stats) = t.iterate().unwrap();
        assert_eq!(stats.initial_ratio_dev, 0.0);
        assert!((0.0..=1.0).contains(&stats.clip_frac));
    }
}

#[test]
fn privileged_rows_reach_only_the_critic() {
    let t = small_trainer();
    let env = &t.venv.env;
    let obs = env.observe(&t.venv.states[0]);
    let mut masked = obs.critic.clone();
    for v in masked.iter_mut().skip(55) {
        *v = 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let critic = Mlp::new(&[env.critic_dim(), 16, 1], 1.0, &mut rng);
    assert_ne!(critic.forward(&obs.critic).unwrap(), critic.forward(&masked).unwrap());
    // The actor input is built without the critic vector at all.
    let mut state = t.venv.states[0].clone();
    state.ball.position = Vector3::new(0.3, -0.2, 0.1);
    state.omega_measured = Vector3::new(4.0, -1.0, 2.0);
    assert_eq!(env.build_actor_observation(&state), obs.actor);
    assert_ne!(env.observe(&state).critic, obs.critic);
}

/// Answers every read with arbitrary motor angles.
struct WildDriver(ChaCha8Rng);

impl MotorDriver for WildDriver {
    fn read_motor_state(&mut self) -> Result<MotorState, DriverError> {
        let r = &mut self.0;
        Ok(MotorState {
            theta: (0..16).map(|_| r.random_range(-50.0..50.0)).collect(),
            theta_dot: (0..16).map(|_| r.random_range(-100.0..100.0)).collect(),
            timestamp: 0.0,
        })
    }

    fn write_motor_targets(&mut self, _: &[f64]) -> Result<(), DriverError> {
        Ok(())
    }
}

#[test]
fn command_stays_in_limits_whatever_the_driver_says() {
    let m = proto();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let policy = Policy {
        actor: Mlp::new(&[77, 32, 11], 5.0, &mut rng),
        ranges: m.actuated_ranges(),
    };
    let cfg = ControlLoopConfig {
        realtime: false,
        ..ControlLoopConfig::default()
    };
    let cal = calibrate(m, &[0.0; 16], &[0.0; 11]).unwrap();
    let mut state = ControlState::new(m, &cfg, &[0.0; 11]).unwrap();
    let mut driver = WildDriver(ChaCha8Rng::seed_from_u64(18));
    let clock = std::time::Instant::now();
    for _ in 0..300 {
        let rec = control_step(&mut driver, m, &cal, &policy, &cfg, &mut state, &clock).unwrap();
        for (j, &(lo, hi)) in policy.ranges.iter().enumerate() {
            assert!(lo <= rec.qbar[j] && rec.qbar[j] <= hi);
        }
        assert!(rec.t_read <= rec.t_estimate && rec.t_estimate <= rec.t_act && rec.t_act <= rec.t_write);
    }
}
