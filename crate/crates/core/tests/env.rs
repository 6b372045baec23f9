//! Surrogate environment: long-horizon stability, vectorization and reward bounds.

use dyna_loco::env::{env_reset, env_step, reward_compose, EnvParams, VecEnv, OBS_DIM};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Worst-case `|x_i|` over inputs in [-1, 1]: the l1 norm of the impulse
/// response of the linear plant `x' = A x + B a`, rebuilt here from the
/// equations of motion. State order `[q(4), q̇(4), g(2), v(2), ω]`.
fn impulse_bounds(p: &EnvParams<f64>) -> Vec<f64> {
    let dt = p.dt;
    let n = 13;
    let mut a = Array2::<f64>::zeros((n, n));
    let mut b = Array2::<f64>::zeros((n, 4));
    for j in 0..4 {
        let (q, qd) = (j, 4 + j);
        // q̇' = (1 − dt c) q̇ − dt kp q + dt kp a
        a[[qd, qd]] = 1.0 - dt * (p.kd + p.joint_damping);
        a[[qd, q]] = -dt * p.kp;
        b[[qd, j]] = dt * p.kp;
        // q' = q + dt q̇'
        a[[q, q]] = 1.0 - dt * dt * p.kp;
        a[[q, qd]] = dt * (1.0 - dt * (p.kd + p.joint_damping));
        b[[q, j]] = dt * dt * p.kp;
    }
    let qd_row = |m: &Array2<f64>, j: usize| m.row(4 + j).to_owned();
    let (mut a_next, mut b_next) = (a.clone(), b.clone());
    for axis in 0..2 {
        let v = 10 + axis;
        let mut ra = ndarray::Array1::zeros(n);
        let mut rb = ndarray::Array1::zeros(4);
        ra[v] = 1.0 - dt * p.lin_damping;
        for j in 0..4 {
            ra = ra + dt * p.mix_lin[axis][j] * qd_row(&a, j);
            rb = rb + dt * p.mix_lin[axis][j] * qd_row(&b, j);
        }
        a_next.row_mut(v).assign(&ra);
        b_next.row_mut(v).assign(&rb);
    }
    let mut ra = ndarray::Array1::zeros(n);
    let mut rb = ndarray::Array1::zeros(4);
    ra[12] = 1.0 - dt * p.yaw_damping;
    for j in 0..4 {
        ra = ra + dt * p.mix_yaw[j] * qd_row(&a, j);
        rb = rb + dt * p.mix_yaw[j] * qd_row(&b, j);
    }
    a_next.row_mut(12).assign(&ra);
    b_next.row_mut(12).assign(&rb);
    for axis in 0..2 {
        let (g, v) = (8 + axis, 10 + axis);
        let mut ra = dt * p.tilt_coupling * a_next.row(v).to_owned();
        ra[g] += 1.0 - dt * p.tilt_relaxation;
        let rb = dt * p.tilt_coupling * b_next.row(v).to_owned();
        a_next.row_mut(g).assign(&ra);
        b_next.row_mut(g).assign(&rb);
    }
    let mut bounds = vec![0.0; n];
    let mut resp = b_next.clone();
    for _ in 0..5000 {
        for i in 0..n {
            bounds[i] += resp.row(i).iter().map(|x| x.abs()).sum::<f64>();
        }
        resp = a_next.dot(&resp);
    }
    bounds
}

#[test]
fn ten_thousand_random_steps_stay_within_impulse_bounds() {
    let params = EnvParams::<f64>::default();
    let bounds = impulse_bounds(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut state, mut cmd, _) = env_reset(&params, &mut rng);
    let mut seen = [0.0f64; 13];
    let mut episodes = 0;
    for _ in 0..10_000 {
        let action: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let out = env_step(&params, &state, &cmd, &action, &mut rng).unwrap();
        for (m, x) in seen.iter_mut().zip(out.next_state.physical()) {
            *m = m.max(x.abs());
        }
        assert!((0.0..=1.0).contains(&out.reward));
        if out.done {
            episodes += 1;
            (state, cmd, _) = env_reset(&params, &mut rng);
        } else {
            state = out.next_state;
        }
    }
    assert!(episodes >= 10_000 / params.episode_len);
    // Reset noise (std 0.01) adds a decaying transient on top of the forced response.
    for i in 0..13 {
        assert!(seen[i] <= bounds[i] + 0.1, "component {i}: {} > bound {}", seen[i], bounds[i]);
    }
}

#[test]
fn vector_env_matches_sequential_loop() {
    let params = EnvParams::<f64>::default();
    let k = 4;
    let seed = 19;
    let mut venv = VecEnv::new(params.clone(), k, seed).unwrap();
    let mut rngs: Vec<ChaCha8Rng> = (0..k)
        .map(|e| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(e as u64);
            r
        })
        .collect();
    let mut seq: Vec<_> = rngs.iter_mut().map(|r| env_reset(&params, r)).collect();
    for e in 0..k {
        assert_eq!(venv.observations().row(e).to_vec(), seq[e].2.to_vec());
    }
    let mut arng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..700 {
        let actions = Array2::from_shape_fn((k, 4), |_| arng.random_range(-1.0..1.0));
        let steps = venv.step(actions.view()).unwrap();
        for e in 0..k {
            let a: [f64; 4] = std::array::from_fn(|j| actions[[e, j]]);
            let out = env_step(&params, &seq[e].0, &seq[e].1, &a, &mut rngs[e]).unwrap();
            assert_eq!(steps[e].result, out);
            if out.done {
                seq[e] = env_reset(&params, &mut rngs[e]);
            } else {
                seq[e] = (out.next_state, seq[e].1, out.obs);
            }
            assert_eq!(venv.observations().row(e).to_vec(), seq[e].2.to_vec());
            assert_eq!(venv.observations().ncols(), OBS_DIM);
        }
    }
}

#[test]
fn reward_composition_bounds_on_random_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..100_000 {
        let r_task: f64 = rng.random_range(0.0..2.0);
        let r_aux: f64 = if i % 10 == 0 { 0.0 } else { -rng.random_range(0.0..50.0f64) };
        let sigma: f64 = rng.random_range(0.0..1.0);
        let r = reward_compose(r_task, r_aux, sigma).unwrap();
        assert!(r >= 0.0 && r <= r_task);
        if r_aux == 0.0 {
            assert_eq!(r, r_task);
        }
    }
}

proptest! {
    #[test]
    fn composed_reward_is_monotone_in_penalty(r_task in 0.0f64..1.0, a in 0.0f64..10.0, b in 0.0f64..10.0, sigma in 0.01f64..1.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let r_lo = reward_compose(r_task, -lo, sigma).unwrap();
        let r_hi = reward_compose(r_task, -hi, sigma).unwrap();
        prop_assert!(r_hi <= r_lo);
    }

    #[test]
    fn positive_auxiliary_term_is_rejected(r_task in 0.0f64..1.0, aux in 1e-9f64..10.0) {
        prop_assert!(reward_compose(r_task, aux, 0.5).is_err());
    }
}
