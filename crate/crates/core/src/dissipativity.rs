//! Strict dissipativity certificate of the optimal stationary pair.
//!
//! Three storage functions are evaluated on exact moments of `Z = (X, Xˢ)`:
//!
//! * `λ̂(X) = −E|X|²_P`, supply `E|U − KX|²_R̃`;
//! * `λ̄(k, X) = −E[|X|²_P − |X − Xˢ|²_P]`, supply `E[|X̃|²_Q + |Ũ|²_R]`;
//! * `λ̃(k, X) = λ̄(k, X) + E|X − Xˢ|²_S`, supply `E|(X̃, Ũ)|²_H` with `H ≻ 0`.
//!
//! Here `X̃ = X − Xˢ` and `Ũ = U − K Xˢ`. `S = γ S̃` where `S̃ ≻ 0` satisfies
//! `Q + S̃ − AᵀS̃A ≻ 0`, and `γ ∈ (0, 1]` is the largest value for which `H`
//! passes Cholesky.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{
    affine_quad_expectation, certified_min_eigen_lower, cholesky, is_positive_definite, min_pivot, Matrix,
    SymMatrix,
};
use crate::model::{stage_cost, LtiStochasticSystem, QuadraticCost};
use crate::riccati::{solve_dare, RiccatiSolution};
use crate::stationary::MomentTrajectory;

pub const SIGMA_MIN: f64 = 1e-8;
pub const SIGMA_MAX: f64 = 1e6;
/// Smallest `γ` tried before giving up.
pub const GAMMA_FLOOR: f64 = 1e-12;
/// The returned `γ` is within this factor of the largest feasible one.
pub const GAMMA_RESOLUTION: f64 = 1.01;

/// Parametric family the storage weight `S̃` was drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StildeFamily {
    /// `σ I`
    ScaledIdentity,
    /// `σ P`
    ScaledRiccati,
    /// Supplied by the caller.
    Override,
}

#[derive(Debug, Clone, Serialize)]
pub struct StildeChoice {
    #[serde(rename = "S_tilde")]
    pub stilde: SymMatrix,
    pub family: StildeFamily,
    pub sigma: f64,
    /// Smallest Cholesky pivot of `Q + S̃ − AᵀS̃A`.
    pub margin: f64,
}

/// `Q + S̃ − AᵀS̃A`
pub fn stilde_inequality(sys: &LtiStochasticSystem, cost: &QuadraticCost, stilde: &SymMatrix) -> SymMatrix {
    let at = sys.a().transpose();
    SymMatrix::symmetrize(&(&(cost.q().as_matrix() + stilde.as_matrix()) - &at.congruence(stilde)))
}

fn required_margin(cost: &QuadraticCost) -> f64 {
    1e-10 * (1.0 + cost.q().max_abs())
}

/// Searches `σ ∈ [1e-8, 1e6]` (log scale: coarse grid, then golden section
/// around the best grid point) for the `σ` maximizing `σ · margin(σ)` where
/// `margin` is the smallest pivot of `Q + σ(B − AᵀBA)` and `B` the base matrix.
fn search_family(sys: &LtiStochasticSystem, cost: &QuadraticCost, base: &SymMatrix) -> (f64, f64) {
    let margin = |sigma: f64| min_pivot(&stilde_inequality(sys, cost, &base.scale(sigma)));
    let objective = |log_sigma: f64| {
        let sigma = log_sigma.exp();
        sigma * margin(sigma)
    };
    let (lo, hi) = (SIGMA_MIN.ln(), SIGMA_MAX.ln());
    let points = 141;
    let grid: Vec<f64> = (0..points).map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64).collect();
    let values: Vec<f64> = grid.iter().map(|&g| objective(g)).collect();
    let best = values
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .expect("grid is nonempty");
    let mut a = grid[best.saturating_sub(1)];
    let mut b = grid[(best + 1).min(points - 1)];
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (objective(c), objective(d));
    for _ in 0..100 {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = objective(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = objective(d);
        }
    }
    let mut candidates = [(grid[best], values[best]), (c, fc), (d, fd)];
    candidates.sort_by(|x, y| y.1.total_cmp(&x.1));
    let sigma = candidates[0].0.exp();
    (sigma, margin(sigma))
}

/// Finds `S̃ ≻ 0` with `Q + S̃ − AᵀS̃A ≻ 0`, first as `σI`, then as `σP`.
pub fn find_stilde(sys: &LtiStochasticSystem, cost: &QuadraticCost) -> Result<StildeChoice> {
    cost.check_dims(sys)?;
    let need = required_margin(cost);
    let (sigma, margin) = search_family(sys, cost, &SymMatrix::identity(sys.n()));
    if margin >= need {
        return Ok(StildeChoice {
            stilde: SymMatrix::identity(sys.n()).scale(sigma),
            family: StildeFamily::ScaledIdentity,
            sigma,
            margin,
        });
    }
    let mut best_margin = margin;
    if let Ok(sol) = solve_dare(sys, cost) {
        if is_positive_definite(&sol.p) {
            let (sigma_p, margin_p) = search_family(sys, cost, &sol.p);
            if margin_p >= need {
                return Ok(StildeChoice {
                    stilde: sol.p.scale(sigma_p),
                    family: StildeFamily::ScaledRiccati,
                    sigma: sigma_p,
                    margin: margin_p,
                });
            }
            best_margin = best_margin.max(margin_p);
        }
    }
    Err(Error::CertificateNotFound {
        reason: "neither sigma*I nor sigma*P satisfies Q + S~ - A^T S~ A > 0".into(),
        best_margin,
    })
}

/// `[[Q + γS̃ − γAᵀS̃A, −γAᵀS̃B], [−γBᵀS̃A, R − γBᵀS̃B]]`, the matrix of
/// `|x|²_Q + |u|²_R + |x|²_{γS̃} − |Ax + Bu|²_{γS̃}`.
pub fn assemble_h(sys: &LtiStochasticSystem, cost: &QuadraticCost, stilde: &SymMatrix, gamma: f64) -> SymMatrix {
    let s = stilde.scale(gamma);
    let at = sys.a().transpose();
    let bt = sys.b().transpose();
    let sa = s.as_matrix() * sys.a();
    let sb = s.as_matrix() * sys.b();
    let q_gamma = &(cost.q().as_matrix() + s.as_matrix()) - &(&at * &sa);
    let r_gamma = cost.r().as_matrix() - &(&bt * &sb);
    let off = (&at * &sb).scale(-1.0);
    let off_t = off.transpose();
    SymMatrix::symmetrize(&Matrix::block(&[&[&q_gamma, &off], &[&off_t, &r_gamma]]))
}

fn r_gamma(sys: &LtiStochasticSystem, cost: &QuadraticCost, stilde: &SymMatrix, gamma: f64) -> SymMatrix {
    cost.r().sub(&stilde.scale(gamma).congruence(&sys.b().transpose()))
}

fn gamma_feasible(sys: &LtiStochasticSystem, cost: &QuadraticCost, stilde: &SymMatrix, gamma: f64) -> bool {
    is_positive_definite(&r_gamma(sys, cost, stilde, gamma))
        && is_positive_definite(&assemble_h(sys, cost, stilde, gamma))
}

/// Largest `γ ∈ (0, 1]` (within a factor 1.01) such that `H ≻ 0` and
/// `R_γ ≻ 0`: halving from 1, then a golden split of the last bracket in log
/// scale.
pub fn find_gamma(sys: &LtiStochasticSystem, cost: &QuadraticCost, stilde: &SymMatrix) -> Result<(f64, SymMatrix)> {
    let mut gamma = 1.0;
    let mut iterations = 0;
    while !gamma_feasible(sys, cost, stilde, gamma) {
        gamma *= 0.5;
        iterations += 1;
        if gamma < GAMMA_FLOOR {
            return Err(Error::CertificateNotFound {
                reason: format!("H is not positive definite for any gamma >= {GAMMA_FLOOR:e}"),
                best_margin: min_pivot(&assemble_h(sys, cost, stilde, gamma)),
            });
        }
    }
    if gamma < 1.0 {
        let (mut ok, mut fail) = (gamma, (2.0 * gamma).min(1.0));
        let split = (5f64.sqrt() - 1.0) / 2.0;
        while fail / ok > GAMMA_RESOLUTION && iterations < 200 {
            let mid = (ok.ln() + split * (fail.ln() - ok.ln())).exp();
            if gamma_feasible(sys, cost, stilde, mid) {
                ok = mid;
            } else {
                fail = mid;
            }
            iterations += 1;
        }
        gamma = ok;
    }
    Ok((gamma, assemble_h(sys, cost, stilde, gamma)))
}

#[derive(Debug, Clone, Serialize)]
pub struct DissipativityCertificate {
    #[serde(rename = "P")]
    pub p: SymMatrix,
    #[serde(rename = "S_tilde")]
    pub stilde: SymMatrix,
    pub family: StildeFamily,
    pub sigma: f64,
    pub gamma: f64,
    #[serde(rename = "S")]
    pub s: SymMatrix,
    #[serde(rename = "Q_gamma")]
    pub q_gamma: SymMatrix,
    #[serde(rename = "R_gamma")]
    pub r_gamma: SymMatrix,
    #[serde(rename = "H")]
    pub h: SymMatrix,
    #[serde(rename = "lambda_min_H_lower")]
    pub lambda_min_h_lower: f64,
    /// Smallest pivot of `Q + S̃ − AᵀS̃A`.
    pub stilde_margin: f64,
}

impl DissipativityCertificate {
    pub fn n(&self) -> usize {
        self.p.dim()
    }

    /// Re-runs every Cholesky check the certificate relies on.
    pub fn verify(&self, sys: &LtiStochasticSystem, cost: &QuadraticCost) -> Result<()> {
        let fail = |what: &str, m: &SymMatrix| Error::CertificateNotFound {
            reason: format!("{what} is not positive definite"),
            best_margin: min_pivot(m),
        };
        let ineq = stilde_inequality(sys, cost, &self.stilde);
        if !is_positive_definite(&ineq) {
            return Err(fail("Q + S~ - A^T S~ A", &ineq));
        }
        for (what, m) in [("S~", &self.stilde), ("S", &self.s), ("Q_gamma", &self.q_gamma), ("R_gamma", &self.r_gamma), ("H", &self.h)] {
            if !is_positive_definite(m) {
                return Err(fail(what, m));
            }
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::CertificateNotFound { reason: format!("gamma = {} outside (0, 1]", self.gamma), best_margin: 0.0 });
        }
        if self.lambda_min_h_lower <= 0.0 || !is_positive_definite(&self.h.shift(-self.lambda_min_h_lower)) {
            return Err(fail("H - lambda_min_H_lower I", &self.h));
        }
        Ok(())
    }
}

fn assemble_certificate(
    sys: &LtiStochasticSystem,
    cost: &QuadraticCost,
    sol: &RiccatiSolution,
    choice: StildeChoice,
    gamma: f64,
) -> Result<DissipativityCertificate> {
    let h = assemble_h(sys, cost, &choice.stilde, gamma);
    let n = sys.n();
    let l = sys.l();
    let lambda = certified_min_eigen_lower(&h).ok_or_else(|| Error::CertificateNotFound {
        reason: "H is not positive definite".into(),
        best_margin: min_pivot(&h),
    })?;
    let cert = DissipativityCertificate {
        p: sol.p.clone(),
        s: choice.stilde.scale(gamma),
        q_gamma: SymMatrix::symmetrize(&h.sub_matrix(0, 0, n, n)),
        r_gamma: SymMatrix::symmetrize(&h.sub_matrix(n, n, l, l)),
        h,
        lambda_min_h_lower: lambda,
        gamma,
        stilde: choice.stilde,
        family: choice.family,
        sigma: choice.sigma,
        stilde_margin: choice.margin,
    };
    cert.verify(sys, cost)?;
    Ok(cert)
}

/// Searches `S̃` and `γ`, then certifies the result.
pub fn certify(sys: &LtiStochasticSystem, cost: &QuadraticCost, sol: &RiccatiSolution) -> Result<DissipativityCertificate> {
    let choice = find_stilde(sys, cost)?;
    let (gamma, _) = find_gamma(sys, cost, &choice.stilde)?;
    assemble_certificate(sys, cost, sol, choice, gamma)
}

/// Certificate with a caller-supplied `S̃` and optionally `γ`; every
/// condition is still checked.
pub fn certify_with(
    sys: &LtiStochasticSystem,
    cost: &QuadraticCost,
    sol: &RiccatiSolution,
    stilde: SymMatrix,
    gamma: Option<f64>,
) -> Result<DissipativityCertificate> {
    if stilde.dim() != sys.n() {
        return Err(Error::DimensionMismatch(format!("S~ is {0}x{0}", stilde.dim())));
    }
    let margin = min_pivot(&stilde_inequality(sys, cost, &stilde));
    if !is_positive_definite(&stilde) || margin <= 0.0 {
        return Err(Error::CertificateNotFound {
            reason: "supplied S~ does not satisfy S~ > 0 and Q + S~ - A^T S~ A > 0".into(),
            best_margin: margin,
        });
    }
    let gamma = match gamma {
        Some(g) => g,
        None => find_gamma(sys, cost, &stilde)?.0,
    };
    let choice = StildeChoice { stilde, family: StildeFamily::Override, sigma: 1.0, margin };
    assemble_certificate(sys, cost, sol, choice, gamma)
}

/// `λ̂ = −E|X|²_P` on moments of `Z = (X, Xˢ)`.
pub fn storage_lambda_hat(p: &SymMatrix, (mean, cov): (&[f64], &SymMatrix)) -> f64 {
    let n = p.dim();
    let select = Matrix::hstack(&[&Matrix::identity(n), &Matrix::zeros(n, n)]);
    -affine_quad_expectation(mean, cov, &select, &vec![0.0; n], p)
}

fn difference_moment(w: &SymMatrix, (mean, cov): (&[f64], &SymMatrix)) -> f64 {
    let n = w.dim();
    let diff = Matrix::hstack(&[&Matrix::identity(n), &Matrix::identity(n).scale(-1.0)]);
    affine_quad_expectation(mean, cov, &diff, &vec![0.0; n], w)
}

/// `λ̄ = −E|X|²_P + E|X − Xˢ|²_P`
pub fn storage_lambda_bar(p: &SymMatrix, z: (&[f64], &SymMatrix)) -> f64 {
    storage_lambda_hat(p, z) + difference_moment(p, z)
}

/// `λ̃ = λ̄ + E|X − Xˢ|²_S`
pub fn storage_lambda_tilde(p: &SymMatrix, s: &SymMatrix, z: (&[f64], &SymMatrix)) -> f64 {
    storage_lambda_bar(p, z) + difference_moment(s, z)
}

/// Exact infimum of `λ̃` over all laws of `X` when `Xˢ ~ N(0, Σˢ)`:
/// `−tr((P + S) S⁻¹ P Σˢ) = −tr((P + P S⁻¹ P) Σˢ)`.
pub fn lower_bound_m(p: &SymMatrix, s: &SymMatrix, sigma_s: &SymMatrix) -> Result<f64> {
    let chol = cholesky(s)?;
    let s_inv_p = chol.solve(p.as_matrix());
    let weight = SymMatrix::symmetrize(&(p.as_matrix() + &(p.as_matrix() * &s_inv_p)));
    Ok(-weight.trace_product(sigma_s))
}

/// Largest absolute gap between the two sides of each dissipation equality
/// over `k = 0..N`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Default)]
pub struct ResidualReport {
    pub steps: usize,
    /// `ℓ − ℓˢ + λ̂(k) − λ̂(k+1) = E|U − KX|²_R̃`
    pub hat: f64,
    /// `ℓ − ℓˢ + λ̄(k) − λ̄(k+1) = E[|X̃|²_Q + |Ũ|²_R]`
    pub bar: f64,
    /// `ℓ − ℓˢ + λ̃(k) − λ̃(k+1) = E|(X̃, Ũ)|²_H`
    pub tilde: f64,
    /// Largest magnitude among the terms compared.
    pub magnitude: f64,
}

impl ResidualReport {
    pub fn max(&self) -> f64 {
        self.hat.max(self.bar).max(self.tilde)
    }
}

/// Supply rates at step `k`, each computed directly as a quadratic form of
/// the augmented state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Supplies {
    pub hat: f64,
    pub bar: f64,
    pub tilde: f64,
}

/// Right-hand sides of the three dissipation equalities at step `k`.
pub fn supplies(
    cost: &QuadraticCost,
    sol: &RiccatiSolution,
    cert: &DissipativityCertificate,
    traj: &MomentTrajectory,
    k: usize,
) -> Supplies {
    let n = traj.n();
    let l = cost.r().dim();
    let step = traj.control().step(k);
    let z = traj.joint(k);
    let f_x = &step.state_gain;
    let f_s_tilde = &step.stationary_gain - &sol.k;
    // U − K X
    let g_hat = Matrix::hstack(&[&(f_x - &sol.k), &step.stationary_gain]);
    // (X̃, Ũ)
    let diff = Matrix::hstack(&[&Matrix::identity(n), &Matrix::identity(n).scale(-1.0)]);
    let g_u = Matrix::hstack(&[f_x, &f_s_tilde]);
    let g_xu = Matrix::vstack(&[&diff, &g_u]);
    let h_xu = [vec![0.0; n], step.offset.clone()].concat();
    let zero = Matrix::zeros(n, l);
    let q_r = SymMatrix::symmetrize(&Matrix::block(&[
        &[cost.q().as_matrix(), &zero],
        &[&zero.transpose(), cost.r().as_matrix()],
    ]));
    Supplies {
        hat: affine_quad_expectation(z.0, z.1, &g_hat, &step.offset, &sol.r_tilde),
        bar: affine_quad_expectation(z.0, z.1, &g_xu, &h_xu, &q_r),
        tilde: affine_quad_expectation(z.0, z.1, &g_xu, &h_xu, &cert.h),
    }
}

/// `E|(X̃(k), Ũ(k))|²` (unweighted), for the `λ_min(H)` comparison.
pub fn deviation_second_moment(sol: &RiccatiSolution, traj: &MomentTrajectory, k: usize) -> f64 {
    let n = traj.n();
    let step = traj.control().step(k);
    let diff = Matrix::hstack(&[&Matrix::identity(n), &Matrix::identity(n).scale(-1.0)]);
    let g_u = Matrix::hstack(&[&step.state_gain, &(&step.stationary_gain - &sol.k)]);
    let g = Matrix::vstack(&[&diff, &g_u]);
    let h = [vec![0.0; n], step.offset.clone()].concat();
    let z = traj.joint(k);
    affine_quad_expectation(z.0, z.1, &g, &h, &SymMatrix::identity(g.rows()))
}

pub fn verify_dissipation_chain(
    cost: &QuadraticCost,
    sol: &RiccatiSolution,
    cert: &DissipativityCertificate,
    traj: &MomentTrajectory,
) -> ResidualReport {
    let mut report = ResidualReport { steps: traj.horizon(), ..Default::default() };
    for k in 0..traj.horizon() {
        let supplied = stage_cost(cost, &traj.state_control(k)) - stage_cost(cost, &traj.stationary_control(k));
        let (now, next) = (traj.joint(k), traj.joint(k + 1));
        let hat_lhs = supplied + storage_lambda_hat(&cert.p, now) - storage_lambda_hat(&cert.p, next);
        let bar_lhs = supplied + storage_lambda_bar(&cert.p, now) - storage_lambda_bar(&cert.p, next);
        let tilde_lhs =
            supplied + storage_lambda_tilde(&cert.p, &cert.s, now) - storage_lambda_tilde(&cert.p, &cert.s, next);
        let rhs = supplies(cost, sol, cert, traj, k);
        report.hat = report.hat.max((hat_lhs - rhs.hat).abs());
        report.bar = report.bar.max((bar_lhs - rhs.bar).abs());
        report.tilde = report.tilde.max((tilde_lhs - rhs.tilde).abs());
        report.magnitude = [report.magnitude, supplied.abs(), hat_lhs.abs(), bar_lhs.abs(), tilde_lhs.abs()]
            .into_iter()
            .fold(0.0, f64::max);
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AffineControl, Problem};
    use crate::riccati::riccati_backward;
    use crate::stationary::{build_stationary_pair, propagate_joint_moments, NoiseCoupling};

    fn scalar(a: f64, b: f64, q: f64, r: f64) -> (LtiStochasticSystem, QuadraticCost) {
        (
            LtiStochasticSystem::new(Matrix::scalar(a), Matrix::scalar(b), SymMatrix::scalar(10.0)).unwrap(),
            QuadraticCost::new(SymMatrix::scalar(q), SymMatrix::scalar(r)).unwrap(),
        )
    }

    #[test]
    fn contraction_with_identity_weight() {
        let sys = LtiStochasticSystem::new(
            Matrix::from_rows(&[vec![0.5, 0.1], vec![0.0, 0.3]]).unwrap(),
            Matrix::identity(2),
            SymMatrix::identity(2),
        )
        .unwrap();
        let cost = QuadraticCost::new(SymMatrix::identity(2), SymMatrix::identity(2)).unwrap();
        let c = find_stilde(&sys, &cost).unwrap();
        assert_eq!(c.family, StildeFamily::ScaledIdentity);
        assert!(is_positive_definite(&stilde_inequality(&sys, &cost, &c.stilde)));
    }

    #[test]
    fn scalar_example_sigma_is_inside_feasible_interval() {
        let p = Problem::scalar_example();
        let c = find_stilde(&p.system, &p.cost).unwrap();
        assert_eq!(c.family, StildeFamily::ScaledIdentity);
        // 1 − 0.44σ > 0
        assert!(c.sigma > SIGMA_MIN && c.sigma < 1.0 / 0.44);
        assert!((c.margin - (1.0 - 0.44 * c.sigma)).abs() < 1e-12);
    }

    #[test]
    fn expanding_mode_without_state_weight_has_no_certificate() {
        let (sys, cost) = scalar(2.0, 1.0, 0.0, 1.0);
        assert!(matches!(find_stilde(&sys, &cost), Err(Error::CertificateNotFound { .. })));
    }

    #[test]
    fn h_scalar_expansion() {
        let p = Problem::scalar_example();
        let h = assemble_h(&p.system, &p.cost, &SymMatrix::scalar(1.0), 0.1);
        let expected = [[0.956, -0.12], [-0.12, 4.9]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((h[(i, j)] - expected[i][j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn h_limits() {
        let p = Problem::scalar_example();
        let h = assemble_h(&p.system, &p.cost, &SymMatrix::scalar(1.0), 1e-14);
        assert!((h[(0, 0)] - 1.0).abs() < 1e-12 && (h[(1, 1)] - 5.0).abs() < 1e-12 && h[(0, 1)].abs() < 1e-12);
    }

    #[test]
    fn h_matches_half_block_form_in_scalar_case() {
        // H = ½ [[2Q_γ, γE], [γE, 2R_γ]] with E = −AᵀS̃B − BᵀS̃A.
        let (sys, cost) = scalar(0.7, -1.3, 2.0, 0.4);
        let (a, b, st, g) = (0.7, -1.3, 0.9, 0.35);
        let h = assemble_h(&sys, &cost, &SymMatrix::scalar(st), g);
        let e = -a * st * b - b * st * a;
        let q_g = 2.0 + g * st - g * a * st * a;
        let r_g = 0.4 - g * b * st * b;
        assert!((h[(0, 0)] - q_g).abs() < 1e-14);
        assert!((h[(1, 1)] - r_g).abs() < 1e-14);
        assert!((h[(0, 1)] - 0.5 * g * e).abs() < 1e-14);
    }

    #[test]
    fn gamma_one_for_zero_dynamics() {
        let sys = LtiStochasticSystem::new(Matrix::zeros(2, 2), Matrix::zeros(2, 1), SymMatrix::identity(2)).unwrap();
        let cost = QuadraticCost::new(SymMatrix::identity(2), SymMatrix::scalar(1.0)).unwrap();
        let (gamma, h) = find_gamma(&sys, &cost, &SymMatrix::identity(2).scale(3.0)).unwrap();
        assert_eq!(gamma, 1.0);
        assert_eq!(h[(0, 0)], 4.0);
    }

    #[test]
    fn gamma_for_scalar_example_satisfies_leading_minors() {
        let p = Problem::scalar_example();
        let (gamma, h) = find_gamma(&p.system, &p.cost, &SymMatrix::scalar(1.0)).unwrap();
        assert!(h[(0, 0)] > 0.0 && h[(0, 0)] * h[(1, 1)] - h[(0, 1)] * h[(1, 0)] > 0.0);
        // det(γ) = 5 − 3.2γ − γ², positive on the whole interval (0, 1]
        assert_eq!(gamma, 1.0);
    }

    #[test]
    fn tiny_control_weight_forces_small_gamma() {
        let (sys, cost) = scalar(1.2, 1.0, 1.0, 1e-6);
        let (gamma, h) = find_gamma(&sys, &cost, &SymMatrix::scalar(1.0)).unwrap();
        assert!(gamma < 1e-5);
        let minor = h[(0, 0)] * h[(1, 1)] - h[(0, 1)] * h[(1, 0)];
        assert!(h[(0, 0)] > 0.0 && minor > 0.0);
        // within factor 1.01 of infeasibility
        assert!(!gamma_feasible(&sys, &cost, &SymMatrix::scalar(1.0), gamma * GAMMA_RESOLUTION * 1.0001));
    }

    #[test]
    fn certificate_for_scalar_example() {
        let p = Problem::scalar_example();
        let sol = solve_dare(&p.system, &p.cost).unwrap();
        let cert = certify(&p.system, &p.cost, &sol).unwrap();
        cert.verify(&p.system, &p.cost).unwrap();
        assert!(cert.lambda_min_h_lower > 0.0);
    }

    #[test]
    fn override_is_checked() {
        let p = Problem::scalar_example();
        let sol = solve_dare(&p.system, &p.cost).unwrap();
        let cert = certify_with(&p.system, &p.cost, &sol, SymMatrix::scalar(0.5), Some(0.5)).unwrap();
        assert_eq!(cert.family, StildeFamily::Override);
        assert!((cert.s[(0, 0)] - 0.25).abs() < 1e-15);
        assert!(certify_with(&p.system, &p.cost, &sol, SymMatrix::scalar(3.0), None).is_err());
    }

    #[test]
    fn storage_function_values() {
        let p4 = SymMatrix::scalar(4.3495);
        let zero = SymMatrix::zeros(2);
        assert_eq!(storage_lambda_hat(&p4, (&[0.0, 0.0], &zero)), 0.0);
        let cov = SymMatrix::from_diag(&[1.5, 17.0]);
        let v = storage_lambda_hat(&p4, (&[3.0, 0.0], &cov));
        assert!((v + 4.3495 * 10.5).abs() < 1e-12);
        // X = Xˢ: the difference term vanishes
        let same = SymMatrix::from_rows(&[vec![17.0, 17.0], vec![17.0, 17.0]]).unwrap();
        assert!((storage_lambda_bar(&p4, (&[0.0, 0.0], &same)) + 4.3495 * 17.0).abs() < 1e-12);
        // independent, zero mean: −tr(PΣ_X) + tr(P(Σ_X + Σˢ)) = tr(PΣˢ)
        let indep = SymMatrix::from_diag(&[2.0, 17.0]);
        assert!((storage_lambda_bar(&p4, (&[0.0, 0.0], &indep)) - 4.3495 * 17.0).abs() < 1e-12);
        // scalar example at k = 0: −P(1.5 + 9) + P(1.5 + 17 + 9)
        let init = SymMatrix::from_diag(&[1.5, 17.0]);
        let expected = -4.3495 * 10.5 + 4.3495 * 27.5;
        assert!((storage_lambda_bar(&p4, (&[3.0, 0.0], &init)) - expected).abs() < 1e-12);
        let s = SymMatrix::scalar(0.5);
        assert!((storage_lambda_tilde(&p4, &s, (&[3.0, 0.0], &init)) - (expected + 0.5 * 27.5)).abs() < 1e-12);
        assert!((storage_lambda_tilde(&p4, &s, (&[0.0, 0.0], &same)) + 4.3495 * 17.0).abs() < 1e-12);
    }

    #[test]
    fn lower_bound_examples() {
        let p = SymMatrix::scalar(4.3495);
        let s = SymMatrix::scalar(0.5);
        assert_eq!(lower_bound_m(&p, &s, &SymMatrix::zeros(1)).unwrap(), 0.0);
        let m = lower_bound_m(&p, &s, &SymMatrix::scalar(17.0)).unwrap();
        assert!((m + 4.8495 * 4.3495 / 0.5 * 17.0).abs() < 1e-9);
        assert!((m + 717.2).abs() < 0.1);
        assert!(lower_bound_m(&p, &SymMatrix::scalar(0.0), &SymMatrix::scalar(1.0)).is_err());
    }

    #[test]
    fn lower_bound_grid_oracle() {
        // min over x of x S x − 2x(P+S)xs + xs(P+S)xs, averaged over xs ~ N(0, 17)
        let (p, s, var): (f64, f64, f64) = (4.3495, 0.5, 17.0);
        let mut acc = 0.0;
        let nodes = 2001;
        let mut weight = 0.0;
        for i in 0..nodes {
            let xs = -8.0 * var.sqrt() + 16.0 * var.sqrt() * i as f64 / (nodes - 1) as f64;
            let density = (-xs * xs / (2.0 * var)).exp();
            let best = (0..4001)
                .map(|j| -400.0 + 0.2 * j as f64)
                .map(|x| s * x * x - 2.0 * x * (p + s) * xs + xs * (p + s) * xs)
                .fold(f64::INFINITY, f64::min);
            acc += density * best;
            weight += density;
        }
        let oracle = acc / weight;
        let m = lower_bound_m(&SymMatrix::scalar(p), &SymMatrix::scalar(s), &SymMatrix::scalar(var)).unwrap();
        assert!((oracle - m).abs() / m.abs() < 1e-3, "oracle {oracle} vs {m}");
    }

    #[test]
    fn chain_for_scalar_example() {
        let p = Problem::scalar_example();
        let sol = solve_dare(&p.system, &p.cost).unwrap();
        let cert = certify(&p.system, &p.cost, &sol).unwrap();
        let pair = build_stationary_pair(&p.system, &sol).unwrap();
        let sched = riccati_backward(&p.system, &p.cost, 30, &SymMatrix::zeros(1)).unwrap();
        let traj = propagate_joint_moments(&p.system, &AffineControl::from_schedule(&sched), &pair, &p.init, NoiseCoupling::Shared)
            .unwrap();
        let rep = verify_dissipation_chain(&p.cost, &sol, &cert, &traj);
        assert!(rep.max() <= 1e-8, "{rep:?}");

        let steady = propagate_joint_moments(&p.system, &AffineControl::steady(&sol.k, 30), &pair, &p.init, NoiseCoupling::Shared)
            .unwrap();
        for k in 0..30 {
            assert!(supplies(&p.cost, &sol, &cert, &steady, k).hat.abs() < 1e-12);
        }
    }
}
