//! The optimal stationary pair and exact moment propagation of the augmented
//! process `Z(k) = (X(k), Xˢ(k))`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{affine_quad_expectation, is_schur_stable, Matrix, SymMatrix};
use crate::model::{AffineControl, GaussianState, JointMoments, LtiStochasticSystem};
use crate::riccati::RiccatiSolution;

pub const LYAPUNOV_TOL: f64 = 1e-12;
const LYAPUNOV_MAX_DOUBLINGS: usize = 64;

/// Solves `Σ = A_K Σ A_Kᵀ + Σ_W` by doubling: after `j` rounds the iterate
/// holds the first `2^j` terms of `Σ_t A_K^t Σ_W (A_K^t)ᵀ`.
pub fn solve_lyapunov(a_k: &Matrix, sigma_w: &SymMatrix) -> Result<SymMatrix> {
    if !a_k.is_square() || a_k.rows() != sigma_w.dim() {
        return Err(Error::DimensionMismatch("Lyapunov equation operands".into()));
    }
    let mut sigma = sigma_w.as_matrix().clone();
    let mut power = a_k.clone();
    for round in 1..=LYAPUNOV_MAX_DOUBLINGS {
        let inc = power.congruence(&sigma);
        if !inc.is_finite() || inc.max_abs() > 1e150 {
            return Err(Error::NoConvergence { what: "Lyapunov doubling".into(), iterations: round });
        }
        let done = inc.max_abs() <= LYAPUNOV_TOL * (1.0 + sigma.max_abs());
        sigma = &sigma + &inc;
        if done {
            return Ok(SymMatrix::symmetrize(&sigma));
        }
        power = &power * &power;
    }
    Err(Error::NoConvergence { what: "Lyapunov doubling".into(), iterations: LYAPUNOV_MAX_DOUBLINGS })
}

/// `max|Σ − A_K Σ A_Kᵀ − Σ_W|`
pub fn lyapunov_residual(a_k: &Matrix, sigma_w: &SymMatrix, sigma: &SymMatrix) -> f64 {
    (&(sigma.as_matrix() - &a_k.congruence(sigma)) - sigma_w.as_matrix()).max_abs()
}

/// `Uˢ = K Xˢ`, `Xˢ(k) ~ N(0, Σˢ)` for all `k`.
#[derive(Debug, Clone, Serialize)]
pub struct StationaryPair {
    #[serde(rename = "K")]
    pub gain: Matrix,
    #[serde(rename = "A_K")]
    pub a_k: Matrix,
    pub mean: Vec<f64>,
    #[serde(rename = "Sigma_s")]
    pub cov: SymMatrix,
    pub lyapunov_residual: f64,
}

impl StationaryPair {
    pub fn n(&self) -> usize {
        self.mean.len()
    }

    pub fn distribution(&self) -> GaussianState {
        GaussianState { mean: self.mean.clone(), cov: self.cov.clone() }
    }

    /// `(Xˢ, Uˢ)` moments.
    pub fn moments(&self) -> JointMoments {
        JointMoments {
            state: self.distribution(),
            control: GaussianState {
                mean: vec![0.0; self.gain.rows()],
                cov: self.cov.congruence(&self.gain),
            },
            cross: self.cov.as_matrix() * &self.gain.transpose(),
        }
    }
}

pub fn build_stationary_pair(sys: &LtiStochasticSystem, sol: &RiccatiSolution) -> Result<StationaryPair> {
    let a_k = sys.closed_loop(&sol.k);
    if !is_schur_stable(&a_k)? {
        return Err(Error::NoConvergence { what: "stationary pair (A + BK not Schur-stable)".into(), iterations: 0 });
    }
    let cov = solve_lyapunov(&a_k, sys.sigma_w())?;
    let residual = lyapunov_residual(&a_k, sys.sigma_w(), &cov);
    if residual > 1e-9 * (1.0 + cov.max_abs()) {
        return Err(Error::NoConvergence { what: format!("Lyapunov residual {residual:e}"), iterations: 0 });
    }
    Ok(StationaryPair { gain: sol.k.clone(), a_k, mean: vec![0.0; sys.n()], cov, lyapunov_residual: residual })
}

/// How `W(k)` enters the two rows of the augmented recursion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseCoupling {
    /// One realization drives both `X` and `Xˢ`.
    #[default]
    Shared,
    /// Independent copies; ablation only.
    Independent,
}

/// Exact Gaussian moments of `Z(k) = (X(k), Xˢ(k))` for `k = 0..=N` under an
/// affine control law.
#[derive(Debug, Clone)]
pub struct MomentTrajectory {
    n: usize,
    gain: Matrix,
    coupling: NoiseCoupling,
    control: AffineControl,
    means: Vec<Vec<f64>>,
    covs: Vec<SymMatrix>,
}

/// `X(0)` independent of `Xˢ(0) ~ N(0, Σˢ)`.
pub fn independent_initial(init: &GaussianState, pair: &StationaryPair) -> (Vec<f64>, SymMatrix) {
    let n = init.dim();
    let mean = [init.mean.as_slice(), pair.mean.as_slice()].concat();
    let zero = Matrix::zeros(n, n);
    let cov = Matrix::block(&[&[init.cov.as_matrix(), &zero], &[&zero, pair.cov.as_matrix()]]);
    (mean, SymMatrix::symmetrize(&cov))
}

pub fn propagate_joint_moments(
    sys: &LtiStochasticSystem,
    control: &AffineControl,
    pair: &StationaryPair,
    init: &GaussianState,
    coupling: NoiseCoupling,
) -> Result<MomentTrajectory> {
    if init.dim() != sys.n() {
        return Err(Error::DimensionMismatch(format!("initial state has dimension {}", init.dim())));
    }
    let (mean, cov) = independent_initial(init, pair);
    propagate_from(sys, control, pair, mean, cov, coupling)
}

/// Propagation from an arbitrary joint law of `Z(0)`.
pub fn propagate_from(
    sys: &LtiStochasticSystem,
    control: &AffineControl,
    pair: &StationaryPair,
    z_mean: Vec<f64>,
    z_cov: SymMatrix,
    coupling: NoiseCoupling,
) -> Result<MomentTrajectory> {
    let n = sys.n();
    if control.n() != n || control.l() != sys.l() || pair.n() != n {
        return Err(Error::DimensionMismatch("control law or stationary pair does not match the system".into()));
    }
    if z_mean.len() != 2 * n || z_cov.dim() != 2 * n {
        return Err(Error::DimensionMismatch("augmented initial moments must have dimension 2n".into()));
    }
    let sw = sys.sigma_w().as_matrix();
    let noise = match coupling {
        NoiseCoupling::Shared => Matrix::block(&[&[sw, sw], &[sw, sw]]),
        NoiseCoupling::Independent => {
            let z = Matrix::zeros(n, n);
            Matrix::block(&[&[sw, &z], &[&z, sw]])
        }
    };
    let horizon = control.horizon();
    let mut means = Vec::with_capacity(horizon + 1);
    let mut covs = Vec::with_capacity(horizon + 1);
    means.push(z_mean);
    covs.push(z_cov);
    let zero = Matrix::zeros(n, n);
    for step in control.steps() {
        let top_left = sys.a() + &(sys.b() * &step.state_gain);
        let top_right = sys.b() * &step.stationary_gain;
        let transition = Matrix::block(&[&[&top_left, &top_right], &[&zero, &pair.a_k]]);
        let drive = sys.b().mul_vec(&step.offset);
        let prev_mean = means.last().expect("nonempty");
        let mut next_mean = transition.mul_vec(prev_mean);
        for (m, d) in next_mean.iter_mut().zip(&drive) {
            *m += d;
        }
        let next_cov = &transition.congruence(covs.last().expect("nonempty")) + &noise;
        means.push(next_mean);
        covs.push(SymMatrix::symmetrize(&next_cov));
    }
    Ok(MomentTrajectory { n, gain: pair.gain.clone(), coupling, control: control.clone(), means, covs })
}

impl MomentTrajectory {
    pub fn horizon(&self) -> usize {
        self.control.horizon()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn coupling(&self) -> NoiseCoupling {
        self.coupling
    }

    pub fn control(&self) -> &AffineControl {
        &self.control
    }

    /// Steady gain `K` of the stationary pair.
    pub fn stationary_gain(&self) -> &Matrix {
        &self.gain
    }

    /// Mean and covariance of `Z(k)`.
    pub fn joint(&self, k: usize) -> (&[f64], &SymMatrix) {
        (&self.means[k], &self.covs[k])
    }

    pub fn state(&self, k: usize) -> GaussianState {
        let n = self.n;
        GaussianState {
            mean: self.means[k][..n].to_vec(),
            cov: SymMatrix::symmetrize(&self.covs[k].sub_matrix(0, 0, n, n)),
        }
    }

    pub fn stationary(&self, k: usize) -> GaussianState {
        let n = self.n;
        GaussianState {
            mean: self.means[k][n..].to_vec(),
            cov: SymMatrix::symmetrize(&self.covs[k].sub_matrix(n, n, n, n)),
        }
    }

    /// `Cov(X(k), Xˢ(k))`
    pub fn cross_cov(&self, k: usize) -> Matrix {
        self.covs[k].sub_matrix(0, self.n, self.n, self.n)
    }

    /// `(X(k), U(k))` moments, `k < N`.
    pub fn state_control(&self, k: usize) -> JointMoments {
        let step = self.control.step(k);
        let f = step.augmented_gain();
        let (mean, cov) = self.joint(k);
        let u_mean: Vec<f64> = f.mul_vec(mean).iter().zip(&step.offset).map(|(a, b)| a + b).collect();
        let select_x = Matrix::hstack(&[&Matrix::identity(self.n), &Matrix::zeros(self.n, self.n)]);
        JointMoments {
            state: self.state(k),
            control: GaussianState { mean: u_mean, cov: cov.congruence(&f) },
            cross: &(&select_x * cov.as_matrix()) * &f.transpose(),
        }
    }

    /// `(Xˢ(k), Uˢ(k) = K Xˢ(k))` moments.
    pub fn stationary_control(&self, k: usize) -> JointMoments {
        let n = self.n;
        let l = self.gain.rows();
        let f = Matrix::hstack(&[&Matrix::zeros(l, n), &self.gain]);
        let (mean, cov) = self.joint(k);
        let select_s = Matrix::hstack(&[&Matrix::zeros(n, n), &Matrix::identity(n)]);
        JointMoments {
            state: self.stationary(k),
            control: GaussianState { mean: f.mul_vec(mean), cov: cov.congruence(&f) },
            cross: &(&select_s * cov.as_matrix()) * &f.transpose(),
        }
    }

    /// `E[(G Z(k) + h)ᵀ W (G Z(k) + h)]`
    pub fn expect_quadratic(&self, k: usize, g: &Matrix, h: &[f64], w: &SymMatrix) -> f64 {
        let (mean, cov) = self.joint(k);
        affine_quad_expectation(mean, cov, g, h, w)
    }

    /// `[I, −I]`, so that `X̃ = D Z`.
    pub fn difference_map(&self) -> Matrix {
        Matrix::hstack(&[&Matrix::identity(self.n), &Matrix::identity(self.n).scale(-1.0)])
    }

    /// `E|X(k) − Xˢ(k)|²_W`
    pub fn difference_moment(&self, k: usize, w: &SymMatrix) -> f64 {
        self.expect_quadratic(k, &self.difference_map(), &vec![0.0; self.n], w)
    }

    /// Covariance-and-mean second moment `E[X̃ X̃ᵀ]` of the difference process.
    pub fn difference_second_moment(&self, k: usize) -> SymMatrix {
        let d = self.difference_map();
        let (mean, cov) = self.joint(k);
        let m = d.mul_vec(mean);
        let mm = &Matrix::column(&m) * &Matrix::column(&m).transpose();
        SymMatrix::symmetrize(&(&cov.congruence(&d).into_matrix() + &mm))
    }

    /// Rows `k, mean..., cov upper triangle...`.
    pub fn to_csv(&self) -> String {
        let dim = 2 * self.n;
        let mut out = String::from("k");
        for i in 0..dim {
            let _ = write!(out, ",mean_{i}");
        }
        for i in 0..dim {
            for j in i..dim {
                let _ = write!(out, ",cov_{i}_{j}");
            }
        }
        out.push('\n');
        for (k, (mean, cov)) in self.means.iter().zip(&self.covs).enumerate() {
            let _ = write!(out, "{k}");
            for v in mean {
                let _ = write!(out, ",{v}");
            }
            for i in 0..dim {
                for j in i..dim {
                    let _ = write!(out, ",{}", cov[(i, j)]);
                }
            }
            out.push('\n');
        }
        out
    }
}
