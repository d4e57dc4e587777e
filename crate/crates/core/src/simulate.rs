//! Seedable Monte Carlo paths of the closed loop and the stationary pair under
//! one shared noise realization.
//!
//! Standard normals come from a counter-based SplitMix64 stream and the
//! Box–Muller transform. Draw `c` at step `k` of stream `s` depends only on
//! `(seed, s, k, c)`, so paths are order-independent and can be generated in
//! parallel without changing results.

use std::io::{self, Write};

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::matrix::{psd_factor, Matrix, SymMatrix};
use crate::model::{stage_cost, AffineControl, GaussianState, JointMoments, LtiStochasticSystem, Perturbation, QuadraticCost};
use crate::riccati::RiccatiSolution;
use crate::stationary::{propagate_joint_moments, MomentTrajectory, NoiseCoupling, StationaryPair};

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 output function.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the `index`-th child of `seed`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    mix64(seed ^ mix64(index.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA)))
}

/// Random-access standard normal generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NormalStream {
    base: u64,
}

impl NormalStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { base: derive_seed(seed, stream) }
    }

    /// Position `i` of the SplitMix64 sequence starting at `base`.
    fn raw(&self, i: u64) -> u64 {
        mix64(self.base.wrapping_add(i.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA)))
    }

    /// Uniform on `(0, 1]`.
    fn uniform(&self, i: u64) -> f64 {
        ((self.raw(i) >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal number `component` of block `k`, for blocks of `width`.
    pub fn normal(&self, k: usize, component: usize, width: usize) -> f64 {
        let pairs = width.div_ceil(2) as u64;
        let pair = k as u64 * pairs + (component / 2) as u64;
        let u1 = self.uniform(2 * pair);
        let u2 = self.uniform(2 * pair + 1);
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        if component.is_multiple_of(2) {
            radius * angle.cos()
        } else {
            radius * angle.sin()
        }
    }

    pub fn normals(&self, k: usize, width: usize) -> Vec<f64> {
        (0..width).map(|c| self.normal(k, c, width)).collect()
    }
}

/// `mean + L ξ` with `L` the clamped Cholesky factor of `cov`.
fn correlate(factor: &Matrix, mean: &[f64], xi: &[f64]) -> Vec<f64> {
    factor.mul_vec(xi).iter().zip(mean).map(|(a, m)| a + m).collect()
}

fn factor_of(cov: &SymMatrix) -> Result<Matrix> {
    psd_factor(cov).map_err(|e| Error::NotPositiveSemidefinite(format!("covariance: {e:?}")))
}

/// Noise draws `w(0..N)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseRealization {
    pub seed: u64,
    pub samples: Vec<Vec<f64>>,
}

impl NoiseRealization {
    pub fn horizon(&self) -> usize {
        self.samples.len()
    }

    /// First `horizon` draws; equal to sampling with the shorter horizon.
    pub fn prefix(&self, horizon: usize) -> Self {
        Self { seed: self.seed, samples: self.samples[..horizon.min(self.samples.len())].to_vec() }
    }
}

const NOISE_STREAM: u64 = 0;
const INITIAL_STREAM: u64 = 1;
const STATIONARY_INITIAL_STREAM: u64 = 2;

pub fn sample_noise(seed: u64, horizon: usize, sigma_w: &SymMatrix) -> Result<NoiseRealization> {
    let n = sigma_w.dim();
    let factor = factor_of(sigma_w)?;
    let stream = NormalStream::new(seed, NOISE_STREAM);
    let zero = vec![0.0; n];
    let samples = (0..horizon).map(|k| correlate(&factor, &zero, &stream.normals(k, n))).collect();
    Ok(NoiseRealization { seed, samples })
}

/// One realization of `(X, Xˢ, U, Uˢ)` driven by a shared `w`.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    n: usize,
    l: usize,
    horizon: usize,
    x: Vec<f64>,
    xs: Vec<f64>,
    u: Vec<f64>,
    us: Vec<f64>,
    w: Vec<f64>,
    stage_costs: Vec<f64>,
}

impl Path {
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn x(&self, k: usize) -> &[f64] {
        &self.x[k * self.n..(k + 1) * self.n]
    }

    pub fn xs(&self, k: usize) -> &[f64] {
        &self.xs[k * self.n..(k + 1) * self.n]
    }

    pub fn u(&self, k: usize) -> &[f64] {
        &self.u[k * self.l..(k + 1) * self.l]
    }

    pub fn us(&self, k: usize) -> &[f64] {
        &self.us[k * self.l..(k + 1) * self.l]
    }

    pub fn w(&self, k: usize) -> &[f64] {
        &self.w[k * self.n..(k + 1) * self.n]
    }

    /// Realized `ℓ(x(k), u(k))`.
    pub fn stage_costs(&self) -> &[f64] {
        &self.stage_costs
    }

    pub fn total_cost(&self) -> f64 {
        self.stage_costs.iter().sum()
    }

    /// `|(x − xˢ, u − K xˢ)|²_H` at step `k`.
    pub fn deviation_norm(&self, k: usize, h: &SymMatrix, k_gain: &Matrix) -> f64 {
        let kx = k_gain.mul_vec(self.xs(k));
        let v: Vec<f64> = self
            .x(k)
            .iter()
            .zip(self.xs(k))
            .map(|(a, b)| a - b)
            .chain(self.u(k).iter().zip(&kx).map(|(a, b)| a - b))
            .collect();
        h.quad(&v)
    }

    /// Largest deviation from `x(k+1) = Ax + Bu + w`, `xˢ(k+1) = Axˢ + Buˢ + w`
    /// and `uˢ = K xˢ`.
    pub fn replay_residual(&self, sys: &LtiStochasticSystem, k_gain: &Matrix) -> f64 {
        let mut worst = 0.0f64;
        for k in 0..self.horizon {
            for (state, control, next) in [
                (self.x(k), self.u(k), self.x(k + 1)),
                (self.xs(k), self.us(k), self.xs(k + 1)),
            ] {
                let ax = sys.a().mul_vec(state);
                let bu = sys.b().mul_vec(control);
                for i in 0..self.n {
                    worst = worst.max((next[i] - ax[i] - bu[i] - self.w(k)[i]).abs());
                }
            }
            let kx = k_gain.mul_vec(self.xs(k));
            for (a, b) in self.us(k).iter().zip(&kx) {
                worst = worst.max((a - b).abs());
            }
        }
        worst
    }
}

fn realized_stage_cost(cost: &QuadraticCost, x: &[f64], u: &[f64]) -> f64 {
    cost.q().quad(x) + cost.r().quad(u)
}

/// Draws `x(0) ~ init` and `xˢ(0) ~ N(0, Σˢ)` independently from sub-streams
/// of `path_seed`, then rolls both recursions forward with the same `w`.
pub fn simulate_pair(
    sys: &LtiStochasticSystem,
    cost: &QuadraticCost,
    control: &AffineControl,
    pair: &StationaryPair,
    init: &GaussianState,
    noise: &NoiseRealization,
    path_seed: u64,
) -> Result<Path> {
    let n = sys.n();
    if init.dim() != n {
        return Err(Error::DimensionMismatch(format!("initial state has dimension {}", init.dim())));
    }
    let x0 = correlate(&factor_of(&init.cov)?, &init.mean, &NormalStream::new(path_seed, INITIAL_STREAM).normals(0, n));
    let xs0 = correlate(
        &factor_of(&pair.cov)?,
        &pair.mean,
        &NormalStream::new(path_seed, STATIONARY_INITIAL_STREAM).normals(0, n),
    );
    simulate_from(sys, cost, control, pair, x0, xs0, noise)
}

/// Rollout from given initial points.
pub fn simulate_from(
    sys: &LtiStochasticSystem,
    cost: &QuadraticCost,
    control: &AffineControl,
    pair: &StationaryPair,
    x0: Vec<f64>,
    xs0: Vec<f64>,
    noise: &NoiseRealization,
) -> Result<Path> {
    let (n, l) = (sys.n(), sys.l());
    let horizon = noise.horizon();
    if control.horizon() < horizon {
        return Err(Error::HorizonMismatch(format!(
            "control has horizon {} but the noise realization has {horizon}",
            control.horizon()
        )));
    }
    if control.n() != n || control.l() != l || pair.n() != n || x0.len() != n || xs0.len() != n {
        return Err(Error::DimensionMismatch("control, stationary pair or initial point does not match the system".into()));
    }
    if noise.samples.iter().any(|w| w.len() != n) {
        return Err(Error::DimensionMismatch("noise samples do not match the state dimension".into()));
    }
    let mut path = Path {
        n,
        l,
        horizon,
        x: Vec::with_capacity(n * (horizon + 1)),
        xs: Vec::with_capacity(n * (horizon + 1)),
        u: Vec::with_capacity(l * horizon),
        us: Vec::with_capacity(l * horizon),
        w: Vec::with_capacity(n * horizon),
        stage_costs: Vec::with_capacity(horizon),
    };
    let (mut x, mut xs) = (x0, xs0);
    let step_once = |state: &[f64], input: &[f64], w: &[f64]| -> Vec<f64> {
        let ax = sys.a().mul_vec(state);
        let bu = sys.b().mul_vec(input);
        (0..n).map(|i| ax[i] + bu[i] + w[i]).collect()
    };
    for (k, w) in noise.samples.iter().enumerate() {
        let u = control.step(k).apply(&x, &xs);
        let us = pair.gain.mul_vec(&xs);
        path.stage_costs.push(realized_stage_cost(cost, &x, &u));
        path.x.extend_from_slice(&x);
        path.xs.extend_from_slice(&xs);
        path.u.extend_from_slice(&u);
        path.us.extend_from_slice(&us);
        path.w.extend_from_slice(w);
        x = step_once(&x, &u, w);
        xs = step_once(&xs, &us, w);
    }
    path.x.extend_from_slice(&x);
    path.xs.extend_from_slice(&xs);
    Ok(path)
}

/// Everything needed to generate path `i` of an ensemble.
#[derive(Debug, Clone, Copy)]
pub struct EnsembleSpec<'a> {
    pub sys: &'a LtiStochasticSystem,
    pub cost: &'a QuadraticCost,
    pub control: &'a AffineControl,
    pub pair: &'a StationaryPair,
    pub init: &'a GaussianState,
    pub horizon: usize,
    pub seed: u64,
}

impl EnsembleSpec<'_> {
    /// Path `i` with its own noise and initial draws.
    pub fn path(&self, i: usize) -> Result<Path> {
        let path_seed = derive_seed(self.seed, i as u64);
        let noise = sample_noise(path_seed, self.horizon, self.sys.sigma_w())?;
        simulate_pair(self.sys, self.cost, self.control, self.pair, self.init, &noise, path_seed)
    }

    /// Applies `f` to each of `m` paths in parallel and returns the results in
    /// path order; paths are dropped once mapped.
    pub fn map<T: Send>(&self, m: usize, f: impl Fn(&Path) -> T + Sync) -> Result<Vec<T>> {
        (0..m).into_par_iter().map(|i| self.path(i).map(|p| f(&p))).collect()
    }
}

#[derive(Debug, Clone)]
pub struct PathEnsemble {
    pub seed: u64,
    pub paths: Vec<Path>,
}

impl PathEnsemble {
    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }
}

pub fn simulate_ensemble(spec: &EnsembleSpec<'_>, m: usize) -> Result<PathEnsemble> {
    Ok(PathEnsemble { seed: spec.seed, paths: spec.map(m, Path::clone)? })
}

/// Sample mean and standard error of the mean.
pub fn mean_and_stderr(values: &[f64]) -> Result<(f64, f64)> {
    let m = values.len();
    if m < 2 {
        return Err(Error::TooFewPaths { required: 2, got: m });
    }
    let mean = values.iter().sum::<f64>() / m as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
    Ok((mean, (var / m as f64).sqrt()))
}

/// Monte Carlo estimate of `J_N` and its standard error.
pub fn empirical_cost(ensemble: &PathEnsemble) -> Result<(f64, f64)> {
    let totals: Vec<f64> = ensemble.paths.iter().map(Path::total_cost).collect();
    mean_and_stderr(&totals)
}

#[derive(Debug, Clone, Serialize)]
pub struct EnsembleSummary {
    pub seed: u64,
    pub paths: usize,
    pub horizon: usize,
    pub empirical_cost: f64,
    pub standard_error: f64,
    pub exact_cost: f64,
    /// `(empirical − exact) / standard error`
    pub z_score: f64,
    pub max_replay_residual: f64,
}

/// `path_id,k,x_*,xs_*,u_*,us_*,w_*`; `u`, `uˢ`, `w` are empty at `k = N`.
pub fn write_paths_csv<W: Write>(out: &mut W, paths: &[Path]) -> io::Result<()> {
    let Some(first) = paths.first() else {
        return writeln!(out, "path_id,k");
    };
    let (n, l) = (first.n, first.l);
    let mut header = vec!["path_id".to_string(), "k".to_string()];
    for (name, width) in [("x", n), ("xs", n), ("u", l), ("us", l), ("w", n)] {
        header.extend((0..width).map(|i| format!("{name}_{i}")));
    }
    writeln!(out, "{}", header.join(","))?;
    for (id, p) in paths.iter().enumerate() {
        for k in 0..=p.horizon {
            let mut row = vec![id.to_string(), k.to_string()];
            row.extend(p.x(k).iter().chain(p.xs(k)).map(|v| v.to_string()));
            if k < p.horizon {
                row.extend(p.u(k).iter().chain(p.us(k)).chain(p.w(k)).map(|v| v.to_string()));
            } else {
                row.extend(std::iter::repeat_n(String::new(), 2 * l + n));
            }
            writeln!(out, "{}", row.join(","))?;
        }
    }
    Ok(())
}

/// `Δ(N) = J_N(X₀, U* + V) − J_N(X₀, U*)` on a grid of horizons.
#[derive(Debug, Clone, Serialize)]
pub struct GapCurve {
    pub n_grid: Vec<usize>,
    pub deltas: Vec<f64>,
    /// Infimum of `Δ` over the second half of the grid.
    pub tail_inf: f64,
    /// First grid horizon from which `Δ` stays above `tail_inf / 2`.
    pub n0: Option<usize>,
}

fn stage_costs(cost: &QuadraticCost, traj: &MomentTrajectory) -> Vec<f64> {
    (0..traj.horizon()).map(|k| stage_cost(cost, &traj.state_control(k))).collect()
}

fn perturbation_energy(traj: &MomentTrajectory, v: &Perturbation) -> Vec<f64> {
    let l = v.offset.len();
    let g = Matrix::hstack(&[&v.state_gain, &v.stationary_gain]);
    (0..traj.horizon())
        .map(|k| {
            let w = v.schedule.weight(k);
            let off: Vec<f64> = v.offset.iter().map(|c| w * c).collect();
            traj.expect_quadratic(k, &g.scale(w), &off, &SymMatrix::identity(l))
        })
        .collect()
}

/// Gap between the steady optimal feedback `U* = KX` and `U* + V`, evaluated
/// exactly through moment propagation.
pub fn overtaking_gap(
    sys: &LtiStochasticSystem,
    cost: &QuadraticCost,
    sol: &RiccatiSolution,
    pair: &StationaryPair,
    perturbation: &Perturbation,
    init: &GaussianState,
    n_grid: &[usize],
) -> Result<GapCurve> {
    let mut grid = n_grid.to_vec();
    grid.sort_unstable();
    grid.dedup();
    let horizon = *grid.last().ok_or_else(|| Error::InvalidInput("empty horizon grid".into()))?;
    if grid[0] == 0 {
        return Err(Error::InvalidInput("horizons must be at least 1".into()));
    }
    let base = AffineControl::steady(&sol.k, horizon);
    let perturbed = base.perturbed(perturbation)?;
    let base_traj = propagate_joint_moments(sys, &base, pair, init, NoiseCoupling::Shared)?;
    let pert_traj = propagate_joint_moments(sys, &perturbed, pair, init, NoiseCoupling::Shared)?;
    if perturbation_energy(&pert_traj, perturbation).iter().all(|&e| e <= f64::MIN_POSITIVE) {
        return Err(Error::DegeneratePerturbation);
    }
    let base_costs = stage_costs(cost, &base_traj);
    let pert_costs = stage_costs(cost, &pert_traj);
    let mut deltas = Vec::with_capacity(grid.len());
    let mut acc = 0.0;
    let mut upto = 0;
    for &n in &grid {
        while upto < n {
            acc += pert_costs[upto] - base_costs[upto];
            upto += 1;
        }
        deltas.push(acc);
    }
    let tail_inf = deltas[deltas.len() / 2..].iter().copied().fold(f64::INFINITY, f64::min);
    let n0 = if tail_inf > 0.0 {
        let first_bad_from_end = deltas.iter().rposition(|&d| d <= tail_inf / 2.0);
        match first_bad_from_end {
            None => Some(grid[0]),
            Some(i) if i + 1 < grid.len() => Some(grid[i + 1]),
            Some(_) => None,
        }
    } else {
        None
    };
    Ok(GapCurve { n_grid: grid, deltas, tail_inf, n0 })
}

/// Moments of `(X, U)` realized by an ensemble at step `k`, for comparison with
/// the exact values.
pub fn empirical_state_control(paths: &[Path], k: usize) -> Result<JointMoments> {
    let m = paths.len();
    if m < 2 {
        return Err(Error::TooFewPaths { required: 2, got: m });
    }
    let stack = |f: &dyn Fn(&Path) -> Vec<f64>| -> (Vec<f64>, Vec<Vec<f64>>) {
        let rows: Vec<Vec<f64>> = paths.iter().map(f).collect();
        let width = rows[0].len();
        let mean: Vec<f64> = (0..width).map(|i| rows.iter().map(|r| r[i]).sum::<f64>() / m as f64).collect();
        (mean, rows)
    };
    let (mx, xs) = stack(&|p| p.x(k).to_vec());
    let (mu, us) = stack(&|p| p.u(k).to_vec());
    let cov = |a: &[Vec<f64>], ma: &[f64], b: &[Vec<f64>], mb: &[f64]| -> Matrix {
        let mut c = Matrix::zeros(ma.len(), mb.len());
        for (ra, rb) in a.iter().zip(b) {
            for i in 0..ma.len() {
                for j in 0..mb.len() {
                    c[(i, j)] += (ra[i] - ma[i]) * (rb[j] - mb[j]) / (m - 1) as f64;
                }
            }
        }
        c
    };
    Ok(JointMoments {
        state: GaussianState { cov: SymMatrix::symmetrize(&cov(&xs, &mx, &xs, &mx)), mean: mx.clone() },
        control: GaussianState { cov: SymMatrix::symmetrize(&cov(&us, &mu, &us, &mu)), mean: mu.clone() },
        cross: cov(&xs, &mx, &us, &mu),
    })
}
