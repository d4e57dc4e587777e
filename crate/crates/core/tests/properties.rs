//! Randomized properties across modules.

use proptest::prelude::*;
use stoch_turnpike::dissipativity::{
    certify, deviation_second_moment, lower_bound_m, storage_lambda_tilde, supplies, verify_dissipation_chain,
};
use stoch_turnpike::matrix::{cholesky, solve_linear};
use stoch_turnpike::model::{AffineStep, Problem};
use stoch_turnpike::riccati::{modified_cost_decomposition, riccati_backward, solve_dare};
use stoch_turnpike::simulate::NormalStream;
use stoch_turnpike::stationary::{build_stationary_pair, propagate_from, propagate_joint_moments, NoiseCoupling};
use stoch_turnpike::turnpike::{attach_probability_counts, moment_turnpike, optimal_trajectory, probability_turnpike};
use stoch_turnpike::{AffineControl, Matrix, SymMatrix};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |d| Matrix::new(rows, cols, d).unwrap())
}

fn spd(n: usize) -> impl Strategy<Value = SymMatrix> {
    (matrix(n, n), 0.01f64..2.0).prop_map(move |(g, s)| SymMatrix::symmetrize(&(&g * &g.transpose())).shift(s))
}

fn dims() -> impl Strategy<Value = (usize, usize)> {
    (1usize..=4, 1usize..=3)
}

/// Random affine control `U = (K + F_x) X + F_s Xˢ + g` around the steady gain.
fn random_control(seed: u64, k: &Matrix, horizon: usize, scale: f64) -> AffineControl {
    let (l, n) = k.shape();
    let s = NormalStream::new(seed, 99);
    let mut i = 0;
    let mut draw = |rows: usize, cols: usize| {
        let data = (0..rows * cols)
            .map(|_| {
                i += 1;
                scale * s.normal(i, 0, 1)
            })
            .collect();
        Matrix::new(rows, cols, data).unwrap()
    };
    let steps = (0..horizon)
        .map(|_| AffineStep {
            state_gain: k + &draw(l, n),
            stationary_gain: draw(l, n),
            offset: draw(l, 1).as_slice().to_vec(),
        })
        .collect();
    AffineControl::new(n, l, steps).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cholesky_reconstructs(m in (1usize..=6).prop_flat_map(spd)) {
        let l = cholesky(&m).unwrap().into_lower();
        let back = &l * &l.transpose();
        prop_assert!((&back - m.as_matrix()).max_abs() <= 1e-12 * (1.0 + m.max_abs()));
    }

    #[test]
    fn solve_has_small_residual((m, rhs) in (1usize..=6).prop_flat_map(|n| (spd(n), matrix(n, 2)))) {
        let x = solve_linear(&m, &rhs).unwrap();
        let r = &(m.as_matrix() * &x) - &rhs;
        prop_assert!(r.max_abs() <= 1e-10 * (1.0 + m.max_abs() * x.max_abs()));
    }

    #[test]
    fn decomposition_matches_direct_cost(seed in any::<u64>(), (n, l) in dims(), horizon in 1usize..25) {
        let p = Problem::random(seed, n, l);
        let sol = solve_dare(&p.system, &p.cost).unwrap();
        let pair = build_stationary_pair(&p.system, &sol).unwrap();
        let control = random_control(seed, &sol.k, horizon, 0.3);
        let traj = propagate_joint_moments(&p.system, &control, &pair, &p.init, NoiseCoupling::Shared).unwrap();
        let d = modified_cost_decomposition(&p.system, &p.cost, &sol, &traj);
        prop_assert!(d.residual() <= 1e-8 * (1.0 + d.direct.abs()), "{d:?}");
    }

    #[test]
    fn dissipation_chain_for_random_affine_controls(seed in any::<u64>(), (n, l) in dims()) {
        let p = Problem::random(seed, n, l);
        let sol = solve_dare(&p.system, &p.cost).unwrap();
        let pair = build_stationary_pair(&p.system, &sol).unwrap();
        let cert = certify(&p.system, &p.cost, &sol).unwrap();
        let control = random_control(seed, &sol.k, 30, 0.2);
        let traj = propagate_joint_moments(&p.system, &control, &pair, &p.init, NoiseCoupling::Shared).unwrap();
        let rep = verify_dissipation_chain(&p.cost, &sol, &cert, &traj);
        prop_assert!(rep.max() <= 1e-8 * (1.0 + rep.magnitude), "{rep:?}");
        let m = lower_bound_m(&cert.p, &cert.s, &pair.cov).unwrap();
        for k in 0..=30 {
            prop_assert!(storage_lambda_tilde(&cert.p, &cert.s, traj.joint(k)) >= m);
        }
        for k in 0..30 {
            let supply = supplies(&p.cost, &sol, &cert, &traj, k).tilde;
            let energy = deviation_second_moment(&sol, &traj, k);
            prop_assert!(supply >= cert.lambda_min_h_lower * energy * (1.0 - 1e-12));
        }
    }

    #[test]
    fn stationary_cost_identity(seed in any::<u64>(), (n, l) in dims()) {
        let p = Problem::random(seed, n, l);
        let sol = solve_dare(&p.system, &p.cost).unwrap();
        let pair = build_stationary_pair(&p.system, &sol).unwrap();
        let kk = SymMatrix::symmetrize(&p.cost.r().congruence(&sol.k.transpose()));
        let lhs = p.cost.q().trace_product(&pair.cov) + kk.trace_product(&pair.cov);
        let rhs = sol.stationary_cost(&p.system);
        prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + rhs));
    }

    #[test]
    fn riccati_values_grow_with_horizon(seed in any::<u64>(), (n, l) in dims()) {
        let p = Problem::random(seed, n, l);
        let s = NormalStream::new(seed, 5);
        let sched = riccati_backward(&p.system, &p.cost, 40, &SymMatrix::zeros(n)).unwrap();
        // P_N(0) for horizon N is P_40(40 − N)
        let seq = sched.costs_to_go();
        for j in 0..20 {
            let z = s.normals(j, n);
            let values: Vec<f64> = (0..=40).rev().map(|k| seq[k].quad(&z)).collect();
            for w in values.windows(2) {
                prop_assert!(w[1] >= w[0] - 1e-10 * (1.0 + w[0].abs()));
            }
        }
    }

    #[test]
    fn counts_are_monotone(seed in any::<u64>(), (n, l) in dims(), horizon in 1usize..40) {
        let p = Problem::random(seed, n, l);
        let sol = solve_dare(&p.system, &p.cost).unwrap();
        let pair = build_stationary_pair(&p.system, &sol).unwrap();
        let cert = certify(&p.system, &p.cost, &sol).unwrap();
        let traj = optimal_trajectory(&p.system, &p.cost, &pair, &p.init, horizon).unwrap();
        let eps = [0.01, 0.1, 0.5, 1.0, 2.0, 5.0, 50.0];
        let eta = [0.05, 0.1, 0.25, 0.5, 1.0];
        let mut r = moment_turnpike(&p.system, &p.cost, &sol, &cert, &pair, &traj, &eps).unwrap();
        attach_probability_counts(&mut r, &eps, &eta).unwrap();
        let q: Vec<usize> = r.moment_counts.iter().map(|c| c.count).collect();
        prop_assert!(q.windows(2).all(|w| w[0] <= w[1]));
        for &e in &eps {
            let row: Vec<usize> = eta.iter().map(|&h| probability_turnpike(&r, e, h, None).exact).collect();
            prop_assert!(row.windows(2).all(|w| w[0] <= w[1]));
        }
        for &h in &eta {
            let col: Vec<usize> = eps.iter().map(|&e| probability_turnpike(&r, e, h, None).exact).collect();
            prop_assert!(col.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}

/// `M` is below `λ̃` for every law of `X` when `Xˢ ~ N(0, Σˢ)`.
#[test]
fn lower_bound_sampling_oracle() {
    let p = Problem::random(2024, 2, 1);
    let sol = solve_dare(&p.system, &p.cost).unwrap();
    let pair = build_stationary_pair(&p.system, &sol).unwrap();
    let cert = certify(&p.system, &p.cost, &sol).unwrap();
    let m = lower_bound_m(&cert.p, &cert.s, &pair.cov).unwrap();
    let s = NormalStream::new(7, 0);
    let mut closest = f64::INFINITY;
    for i in 0..100_000 {
        let v = s.normals(i, 10);
        // joint law of (X, Xˢ): X = G Xˢ + c + F ξ with ξ independent
        let g = Matrix::new(2, 2, v[0..4].to_vec()).unwrap();
        let f = Matrix::new(2, 2, v[4..8].iter().map(|x| 0.5 * x).collect()).unwrap();
        let c = &v[8..10];
        let sig = pair.cov.as_matrix();
        let xx = &g.congruence(sig) + &(&f * &f.transpose());
        let xs = &g * sig;
        let cov = SymMatrix::symmetrize(&Matrix::block(&[&[&xx, &xs], &[&xs.transpose(), sig]]));
        let mean = [c[0], c[1], 0.0, 0.0];
        let value = storage_lambda_tilde(&cert.p, &cert.s, (&mean, &cov));
        assert!(value >= m - 1e-9 * m.abs(), "sample {i}: {value} < {m}");
        closest = closest.min(value - m);
    }
    // the minimizer X = S⁻¹(P + S) Xˢ attains the bound
    let g = cholesky(&cert.s).unwrap().solve(&(cert.p.as_matrix() + cert.s.as_matrix()));
    let sig = pair.cov.as_matrix();
    let xs = &g * sig;
    let cov = SymMatrix::symmetrize(&Matrix::block(&[&[&g.congruence(sig), &xs], &[&xs.transpose(), sig]]));
    let at_min = storage_lambda_tilde(&cert.p, &cert.s, (&[0.0; 4], &cov));
    assert!((at_min - m).abs() <= 1e-9 * (1.0 + m.abs()));
    assert!(closest >= 0.0);
}

/// Steady feedback from the fully coupled stationary law keeps the joint law
/// fixed.
#[test]
fn coupled_stationary_start_is_a_fixed_point() {
    let p = Problem::random(11, 3, 2);
    let sol = solve_dare(&p.system, &p.cost).unwrap();
    let pair = build_stationary_pair(&p.system, &sol).unwrap();
    let sig = pair.cov.as_matrix();
    let cov = SymMatrix::symmetrize(&Matrix::block(&[&[sig, sig], &[sig, sig]]));
    let traj = propagate_from(&p.system, &AffineControl::steady(&sol.k, 200), &pair, vec![0.0; 6], cov.clone(), NoiseCoupling::Shared)
        .unwrap();
    for k in [1, 50, 200] {
        assert!((traj.joint(k).1.as_matrix() - cov.as_matrix()).max_abs() <= 1e-9 * (1.0 + cov.max_abs()));
    }
}
