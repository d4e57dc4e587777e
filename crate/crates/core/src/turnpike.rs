//! Turnpike diagnostics: distance of the controlled process from the optimal
//! stationary pair, measured by `m_k = E|(X̃(k), Ũ(k))|²_H`, and the counting
//! bounds that follow from strict dissipativity.
//!
//! With `δ = J_N − N tr(PΣ_W)` and `C = λ̃(0) − M`, summing the dissipation
//! equality gives `Σ m_k ≤ δ + C`, hence
//!
//! * `Q_ε = #{k : m_k ≤ ε} ≥ N − (δ + C)/ε`;
//! * `P_{ε,η} = #{k : m_k/ε ≤ η} ≥ N − (δ + C)/(εη)` by the Markov inequality.

use std::fmt::Write as _;

use serde::Serialize;

use crate::dissipativity::{lower_bound_m, storage_lambda_tilde, supplies, DissipativityCertificate};
use crate::error::{Error, Result};
use crate::matrix::SymMatrix;
use crate::model::{stage_cost, AffineControl, GaussianState, LtiStochasticSystem, QuadraticCost};
use crate::riccati::{riccati_backward, RiccatiSolution};
use crate::simulate::{sample_noise, simulate_pair, EnsembleSpec, Path};
use crate::stationary::{propagate_joint_moments, MomentTrajectory, NoiseCoupling, StationaryPair};

/// Relative slack allowed when checking a bound, to absorb rounding in `δ + C`.
pub const BOUND_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MomentCount {
    pub eps: f64,
    /// `Q_ε`
    pub count: usize,
    /// `N − (δ + C)/ε`
    pub bound: f64,
    pub slack: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProbabilityCount {
    pub eps: f64,
    pub eta: f64,
    /// `#{k : m_k/ε ≤ η}`
    pub exact: usize,
    /// `#{k : fraction of paths with |(x̃, ũ)|²_H ≥ ε is ≤ η}`
    pub empirical: Option<usize>,
    /// `N − (δ + C)/(εη)`
    pub bound: f64,
    pub exact_slack: f64,
    pub empirical_slack: Option<f64>,
}

impl ProbabilityCount {
    pub fn exact_holds(&self) -> bool {
        self.exact_slack >= -bound_tolerance(self.bound)
    }

    pub fn empirical_holds(&self) -> Option<bool> {
        self.empirical_slack.map(|s| s >= -bound_tolerance(self.bound))
    }
}

fn bound_tolerance(bound: f64) -> f64 {
    BOUND_TOL * (1.0 + bound.abs())
}

/// Per-step exceedance frequencies `#{paths : |(x̃(k), ũ(k))|²_H ≥ ε} / M`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Exceedance {
    pub paths: usize,
    pub seed: u64,
    pub eps: Vec<f64>,
    /// `frequencies[i][k]` for `eps[i]`.
    pub frequencies: Vec<Vec<f64>>,
}

impl Exceedance {
    fn for_eps(&self, eps: f64) -> Option<&[f64]> {
        self.eps.iter().position(|&e| e == eps).map(|i| self.frequencies[i].as_slice())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TurnpikeReport {
    pub horizon: usize,
    /// `m_k`, `k = 0..N`.
    pub m: Vec<f64>,
    /// `J_N(X₀, U)`
    pub cost: f64,
    /// `tr(PΣ_W)`
    pub stationary_cost: f64,
    /// `J_N − N tr(PΣ_W)`
    pub delta: f64,
    /// `λ̃(0, X₀)`
    pub lambda_tilde_0: f64,
    /// Infimum `M` of `λ̃`.
    pub lower_bound: f64,
    /// `λ̃(0, X₀) − M`
    pub c: f64,
    pub moment_counts: Vec<MomentCount>,
    pub probability_counts: Vec<ProbabilityCount>,
    pub exceedance: Option<Exceedance>,
}

impl TurnpikeReport {
    pub fn delta_plus_c(&self) -> f64 {
        self.delta + self.c
    }

    /// `Q_ε`
    pub fn q_eps(&self, eps: f64) -> usize {
        self.m.iter().filter(|&&m| m <= eps).count()
    }

    pub fn all_exact_bounds_hold(&self) -> bool {
        self.moment_counts.iter().all(|c| c.slack >= -bound_tolerance(c.bound))
            && self.probability_counts.iter().all(ProbabilityCount::exact_holds)
    }

    /// Rows `k, m_k, markov_eps=…, empirical_eps=…`; the Markov column is
    /// `min(1, m_k/ε)`.
    pub fn to_csv(&self) -> String {
        let eps: Vec<f64> = self.moment_counts.iter().map(|c| c.eps).collect();
        let mut out = String::from("k,m_k");
        for e in &eps {
            let _ = write!(out, ",markov_eps={e}");
        }
        if self.exceedance.is_some() {
            for e in &eps {
                let _ = write!(out, ",empirical_eps={e}");
            }
        }
        out.push('\n');
        for (k, &m) in self.m.iter().enumerate() {
            let _ = write!(out, "{k},{m}");
            for e in &eps {
                let _ = write!(out, ",{}", (m / e).min(1.0));
            }
            if let Some(ex) = &self.exceedance {
                for e in &eps {
                    match ex.for_eps(*e) {
                        Some(f) => {
                            let _ = write!(out, ",{}", f[k]);
                        }
                        None => out.push(','),
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Moment diagnostics along `traj` and the `Q_ε` bound for every `ε`.
/// A violated bound is an error, never a warning.
pub fn moment_turnpike(
    sys: &LtiStochasticSystem,
    cost: &QuadraticCost,
    sol: &RiccatiSolution,
    cert: &DissipativityCertificate,
    pair: &StationaryPair,
    traj: &MomentTrajectory,
    eps_list: &[f64],
) -> Result<TurnpikeReport> {
    if eps_list.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
        return Err(Error::InvalidInput("eps values must be positive".into()));
    }
    let horizon = traj.horizon();
    let m: Vec<f64> = (0..horizon).map(|k| supplies(cost, sol, cert, traj, k).tilde).collect();
    let total: f64 = (0..horizon).map(|k| stage_cost(cost, &traj.state_control(k))).sum();
    let stationary_cost = sol.stationary_cost(sys);
    let delta = total - horizon as f64 * stationary_cost;
    if !delta.is_finite() {
        return Err(Error::NonFinite("cost excess".into()));
    }
    let lambda_tilde_0 = storage_lambda_tilde(&cert.p, &cert.s, traj.joint(0));
    let lower_bound = lower_bound_m(&cert.p, &cert.s, &pair.cov)?;
    let c = lambda_tilde_0 - lower_bound;
    let mut report = TurnpikeReport {
        horizon,
        m,
        cost: total,
        stationary_cost,
        delta,
        lambda_tilde_0,
        lower_bound,
        c,
        moment_counts: Vec::new(),
        probability_counts: Vec::new(),
        exceedance: None,
    };
    for &eps in eps_list {
        let count = report.q_eps(eps);
        let bound = horizon as f64 - (delta + c) / eps;
        let entry = MomentCount { eps, count, bound, slack: count as f64 - bound };
        if entry.slack < -bound_tolerance(bound) {
            return Err(Error::BoundViolated(format!(
                "N = {horizon}, eps = {eps}: Q_eps = {count} < {bound}"
            )));
        }
        report.moment_counts.push(entry);
    }
    Ok(report)
}

/// Counts for one `(ε, η)`; the empirical route is filled in when
/// exceedance frequencies for `ε` are available.
pub fn probability_turnpike(report: &TurnpikeReport, eps: f64, eta: f64, exceedance: Option<&Exceedance>) -> ProbabilityCount {
    let n = report.horizon as f64;
    let bound = n - report.delta_plus_c() / (eps * eta);
    let exact = report.m.iter().filter(|&&m| m / eps <= eta).count();
    let empirical = exceedance.and_then(|ex| ex.for_eps(eps)).map(|f| f.iter().filter(|&&p| p <= eta).count());
    ProbabilityCount {
        eps,
        eta,
        exact,
        empirical,
        bound,
        exact_slack: exact as f64 - bound,
        empirical_slack: empirical.map(|e| e as f64 - bound),
    }
}

/// Fills `probability_counts` for the grid `eps × eta`, failing on a violated
/// exact-route bound.
pub fn attach_probability_counts(report: &mut TurnpikeReport, eps_list: &[f64], eta_list: &[f64]) -> Result<()> {
    if eta_list.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
        return Err(Error::InvalidInput("eta values must be positive".into()));
    }
    let mut counts = Vec::with_capacity(eps_list.len() * eta_list.len());
    for &eps in eps_list {
        for &eta in eta_list {
            let count = probability_turnpike(report, eps, eta, report.exceedance.as_ref());
            if !count.exact_holds() {
                return Err(Error::BoundViolated(format!(
                    "N = {}, eps = {eps}, eta = {eta}: P = {} < {}",
                    report.horizon, count.exact, count.bound
                )));
            }
            counts.push(count);
        }
    }
    report.probability_counts = counts;
    Ok(())
}

/// Monte Carlo exceedance frequencies of `|(x̃(k), ũ(k))|²_H ≥ ε`.
pub fn empirical_exceedance(
    spec: &EnsembleSpec<'_>,
    paths: usize,
    cert: &DissipativityCertificate,
    eps_list: &[f64],
) -> Result<Exceedance> {
    if paths == 0 {
        return Err(Error::TooFewPaths { required: 1, got: 0 });
    }
    let horizon = spec.horizon;
    let k_gain = &spec.pair.gain;
    let norms = spec.map(paths, |p| (0..horizon).map(|k| p.deviation_norm(k, &cert.h, k_gain)).collect::<Vec<f64>>())?;
    let frequencies = eps_list
        .iter()
        .map(|&eps| {
            (0..horizon)
                .map(|k| norms.iter().filter(|v| v[k] >= eps).count() as f64 / paths as f64)
                .collect()
        })
        .collect();
    Ok(Exceedance { paths, seed: spec.seed, eps: eps_list.to_vec(), frequencies })
}

/// Finite-horizon optimal control (zero terminal weight) and its moments
/// from `X(0) ~ init`, `Xˢ(0) ~ N(0, Σˢ)` independent.
pub fn optimal_trajectory(
    sys: &LtiStochasticSystem,
    cost: &QuadraticCost,
    pair: &StationaryPair,
    init: &GaussianState,
    horizon: usize,
) -> Result<MomentTrajectory> {
    let sched = riccati_backward(sys, cost, horizon, &SymMatrix::zeros(sys.n()))?;
    propagate_joint_moments(sys, &AffineControl::from_schedule(&sched), pair, init, NoiseCoupling::Shared)
}

/// Proximity of one realization to the stationary realization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MidHorizonProximity {
    pub horizon: usize,
    /// `max |x(k) − xˢ(k)|` over `k ∈ [N/4, 3N/4]`.
    pub mid_window_max: f64,
    /// `max |x(k) − xˢ(k)|` over `k ∈ (3N/4, N]`.
    pub boundary_max: f64,
    /// `|x(N) − xˢ(N)|`
    pub terminal: f64,
    /// `|x(0) − xˢ(0)|`
    pub initial: f64,
}

impl MidHorizonProximity {
    /// The realization leaves the turnpike at the end of the horizon.
    pub fn leaves_turnpike(&self) -> bool {
        self.terminal > self.mid_window_max
    }
}

fn euclid_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

pub fn figure1_metrics(path: &Path) -> MidHorizonProximity {
    let n = path.horizon();
    let gap = |k: usize| euclid_gap(path.x(k), path.xs(k));
    let (lo, hi) = (n / 4, 3 * n / 4);
    MidHorizonProximity {
        horizon: n,
        mid_window_max: (lo..=hi).map(gap).fold(0.0, f64::max),
        boundary_max: (hi + 1..=n).map(gap).fold(0.0, f64::max),
        terminal: gap(n),
        initial: gap(0),
    }
}

/// Realizations of the finite-horizon optimal control for several horizons
/// under one noise realization and one draw of `(x(0), xˢ(0))`.
#[derive(Debug, Clone)]
pub struct Figure1 {
    pub seed: u64,
    pub paths: Vec<Path>,
    pub metrics: Vec<MidHorizonProximity>,
}

pub fn figure1(
    sys: &LtiStochasticSystem,
    cost: &QuadraticCost,
    pair: &StationaryPair,
    init: &GaussianState,
    horizons: &[usize],
    seed: u64,
) -> Result<Figure1> {
    let longest = horizons.iter().copied().max().ok_or_else(|| Error::InvalidInput("no horizons".into()))?;
    let noise = sample_noise(seed, longest, sys.sigma_w())?;
    let mut paths = Vec::with_capacity(horizons.len());
    for &n in horizons {
        let sched = riccati_backward(sys, cost, n, &SymMatrix::zeros(sys.n()))?;
        paths.push(simulate_pair(sys, cost, &AffineControl::from_schedule(&sched), pair, init, &noise.prefix(n), seed)?);
    }
    let metrics = paths.iter().map(figure1_metrics).collect();
    Ok(Figure1 { seed, paths, metrics })
}

impl Figure1 {
    /// Columns `k, w_*, xs_*, x_N{N}_*`; entries past a horizon are empty.
    pub fn to_csv(&self) -> String {
        let Some(longest) = self.paths.iter().max_by_key(|p| p.horizon()) else {
            return String::from("k\n");
        };
        let n = longest.n();
        let mut out = String::from("k");
        for i in 0..n {
            let _ = write!(out, ",w_{i}");
        }
        for i in 0..n {
            let _ = write!(out, ",xs_{i}");
        }
        for p in &self.paths {
            for i in 0..n {
                let _ = write!(out, ",x_N{}_{i}", p.horizon());
            }
        }
        out.push('\n');
        for k in 0..=longest.horizon() {
            let _ = write!(out, "{k}");
            for i in 0..n {
                if k < longest.horizon() {
                    let _ = write!(out, ",{}", longest.w(k)[i]);
                } else {
                    out.push(',');
                }
            }
            for i in 0..n {
                let _ = write!(out, ",{}", longest.xs(k)[i]);
            }
            for p in &self.paths {
                for i in 0..n {
                    if k <= p.horizon() {
                        let _ = write!(out, ",{}", p.x(k)[i]);
                    } else {
                        out.push(',');
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dissipativity::certify;
    use crate::matrix::Matrix;
    use crate::model::Problem;
    use crate::riccati::solve_dare;
    use crate::stationary::{build_stationary_pair, propagate_from};

    struct Setup {
        p: Problem,
        sol: RiccatiSolution,
        pair: StationaryPair,
        cert: DissipativityCertificate,
    }

    fn setup(p: Problem) -> Setup {
        let sol = solve_dare(&p.system, &p.cost).unwrap();
        let pair = build_stationary_pair(&p.system, &sol).unwrap();
        let cert = certify(&p.system, &p.cost, &sol).unwrap();
        Setup { p, sol, pair, cert }
    }

    fn report(s: &Setup, n: usize, eps: &[f64]) -> TurnpikeReport {
        let traj = optimal_trajectory(&s.p.system, &s.p.cost, &s.pair, &s.p.init, n).unwrap();
        moment_turnpike(&s.p.system, &s.p.cost, &s.sol, &s.cert, &s.pair, &traj, eps).unwrap()
    }

    #[test]
    fn noiseless_origin_is_on_the_turnpike() {
        let mut p = Problem::scalar_example();
        p.system = p.system.with_noise(SymMatrix::zeros(1)).unwrap();
        p.init = GaussianState::deterministic(vec![0.0]);
        let s = setup(p);
        let r = report(&s, 20, &[1e-6, 1.0]);
        assert!(r.m.iter().all(|&m| m == 0.0));
        assert!(r.moment_counts.iter().all(|c| c.count == 20));
    }

    #[test]
    fn paper_example_bound_holds() {
        let s = setup(Problem::scalar_example());
        let mut r = report(&s, 20, &[0.5, 1.0, 2.0, 5.0]);
        attach_probability_counts(&mut r, &[0.5, 1.0, 2.0, 5.0], &[0.1, 0.25, 0.5]).unwrap();
        assert!(r.all_exact_bounds_hold());
        let sum: f64 = r.m.iter().sum();
        assert!(sum <= r.delta_plus_c() * (1.0 + 1e-12));
        let q = r.moment_counts.iter().map(|c| c.count).collect::<Vec<_>>();
        assert!(q.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn eps_below_every_moment_gives_nonpositive_bound() {
        let s = setup(Problem::scalar_example());
        let r = report(&s, 20, &[1.0]);
        let eps = r.m.iter().copied().fold(f64::INFINITY, f64::min) * 0.5;
        let r = report(&s, 20, &[eps]);
        assert_eq!(r.moment_counts[0].count, 0);
        assert!(r.moment_counts[0].bound <= 0.0);
    }

    #[test]
    fn trivial_eta_counts_every_step() {
        let s = setup(Problem::scalar_example());
        let r = report(&s, 20, &[1.0]);
        let ex = Exceedance { paths: 1, seed: 0, eps: vec![1.0], frequencies: vec![vec![1.0; 20]] };
        let c = probability_turnpike(&r, 1.0, 1.0, Some(&ex));
        assert_eq!(c.empirical, Some(20));
        let big = probability_turnpike(&r, 1e12, 1.0, None);
        assert_eq!(big.exact, 20);
    }

    #[test]
    fn stationary_start_with_full_coupling_stays_on_turnpike() {
        let s = setup(Problem::scalar_example());
        let sigma = s.pair.cov.as_matrix();
        let cov = SymMatrix::symmetrize(&Matrix::block(&[&[sigma, sigma], &[sigma, sigma]]));
        let traj = propagate_from(
            &s.p.system,
            &AffineControl::steady(&s.sol.k, 30),
            &s.pair,
            vec![0.0, 0.0],
            cov,
            NoiseCoupling::Shared,
        )
        .unwrap();
        let r = moment_turnpike(&s.p.system, &s.p.cost, &s.sol, &s.cert, &s.pair, &traj, &[1e-9]).unwrap();
        assert!(r.m.iter().all(|&m| m.abs() < 1e-9));
        assert_eq!(r.moment_counts[0].count, 30);
    }

    #[test]
    fn cost_excess_stays_bounded_in_horizon() {
        let s = setup(Problem::scalar_example());
        let deltas: Vec<f64> = [5, 10, 20, 40, 80].iter().map(|&n| report(&s, n, &[1.0]).delta).collect();
        let spread = deltas.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            - deltas.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(deltas.iter().all(|d| d.is_finite()));
        // after the initial transient the excess settles
        assert!((deltas[4] - deltas[3]).abs() < 1e-6 * (1.0 + spread));
    }

    #[test]
    fn empirical_route_matches_or_beats_markov_route() {
        let s = setup(Problem::scalar_example());
        let mut r = report(&s, 20, &[2.0]);
        let traj_control = AffineControl::from_schedule(
            &riccati_backward(&s.p.system, &s.p.cost, 20, &SymMatrix::zeros(1)).unwrap(),
        );
        let spec = EnsembleSpec {
            sys: &s.p.system,
            cost: &s.p.cost,
            control: &traj_control,
            pair: &s.pair,
            init: &s.p.init,
            horizon: 20,
            seed: 42,
        };
        r.exceedance = Some(empirical_exceedance(&spec, 10_000, &s.cert, &[2.0]).unwrap());
        attach_probability_counts(&mut r, &[2.0], &[0.5]).unwrap();
        let c = r.probability_counts[0];
        assert!(c.exact_holds());
        assert!(c.empirical.unwrap() >= c.exact);
        assert!(r.to_csv().starts_with("k,m_k,markov_eps=2,empirical_eps=2\n"));
    }

    #[test]
    fn figure1_property_on_paper_example() {
        let s = setup(Problem::scalar_example());
        let fig = figure1(&s.p.system, &s.p.cost, &s.pair, &s.p.init, &[10, 20, 40], 42).unwrap();
        for m in &fig.metrics {
            assert!(m.leaves_turnpike(), "{m:?}");
        }
        // same realization of xˢ across horizons
        assert_eq!(fig.paths[0].xs(10), fig.paths[2].xs(10));
        assert_eq!(fig.paths[0].x(0), fig.paths[2].x(0));
        let csv = fig.to_csv();
        assert!(csv.starts_with("k,w_0,xs_0,x_N10_0,x_N20_0,x_N40_0\n"));
        assert_eq!(csv.lines().count(), 42);
    }

    #[test]
    fn figure1_noiseless_on_turnpike_is_zero() {
        let mut p = Problem::scalar_example();
        p.system = p.system.with_noise(SymMatrix::zeros(1)).unwrap();
        p.init = GaussianState::deterministic(vec![0.0]);
        let s = setup(p);
        let fig = figure1(&s.p.system, &s.p.cost, &s.pair, &s.p.init, &[10], 1).unwrap();
        let m = fig.metrics[0];
        assert_eq!((m.mid_window_max, m.boundary_max, m.terminal), (0.0, 0.0, 0.0));
    }
}
