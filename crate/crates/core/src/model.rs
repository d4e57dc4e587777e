//! Problem definition: the noisy linear plant, the quadratic stage cost,
//! Gaussian state distributions and affine control laws.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{cholesky, psd_factor, spectral_radius_estimate, Matrix, SymMatrix};
use crate::riccati::{self, GainSchedule};
use crate::simulate::NormalStream;

/// `X(k+1) = A X(k) + B U(k) + W(k)`, `W(k) ~ N(0, Σ_W)` i.i.d.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LtiStochasticSystem {
    a: Matrix,
    b: Matrix,
    sigma_w: SymMatrix,
}

impl LtiStochasticSystem {
    pub fn new(a: Matrix, b: Matrix, sigma_w: SymMatrix) -> Result<Self> {
        let n = a.rows();
        if !a.is_square() {
            return Err(Error::DimensionMismatch(format!("A is {}x{}", a.rows(), a.cols())));
        }
        if b.rows() != n || b.cols() == 0 {
            return Err(Error::DimensionMismatch(format!(
                "B is {}x{}, expected {n}xl with l >= 1",
                b.rows(),
                b.cols()
            )));
        }
        if sigma_w.dim() != n {
            return Err(Error::DimensionMismatch(format!(
                "Sigma_W is {0}x{0}, expected {n}x{n}",
                sigma_w.dim()
            )));
        }
        psd_factor(&sigma_w)
            .map_err(|e| Error::NotPositiveSemidefinite(format!("Sigma_W: {e}")))?;
        Ok(Self { a, b, sigma_w })
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn sigma_w(&self) -> &SymMatrix {
        &self.sigma_w
    }

    /// State dimension.
    pub fn n(&self) -> usize {
        self.a.rows()
    }

    /// Control dimension.
    pub fn l(&self) -> usize {
        self.b.cols()
    }

    /// `A + B K`
    pub fn closed_loop(&self, k: &Matrix) -> Matrix {
        &self.a + &(&self.b * k)
    }

    /// Same plant with `Σ_W` replaced.
    pub fn with_noise(&self, sigma_w: SymMatrix) -> Result<Self> {
        Self::new(self.a.clone(), self.b.clone(), sigma_w)
    }
}

/// Stage cost `ℓ(X, U) = E[|X|_Q² + |U|_R²]` with `Q ⪰ 0`, `R ≻ 0`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuadraticCost {
    q: SymMatrix,
    r: SymMatrix,
}

impl QuadraticCost {
    pub fn new(q: SymMatrix, r: SymMatrix) -> Result<Self> {
        cholesky(&r).map_err(|e| Error::InvalidInput(format!("R must be positive definite: {e}")))?;
        psd_factor(&q).map_err(|e| Error::NotPositiveSemidefinite(format!("Q: {e}")))?;
        Ok(Self { q, r })
    }

    pub fn q(&self) -> &SymMatrix {
        &self.q
    }

    pub fn r(&self) -> &SymMatrix {
        &self.r
    }

    pub fn check_dims(&self, sys: &LtiStochasticSystem) -> Result<()> {
        if self.q.dim() != sys.n() || self.r.dim() != sys.l() {
            return Err(Error::DimensionMismatch(format!(
                "cost has Q {}x{} and R {}x{} for a system with n = {}, l = {}",
                self.q.dim(),
                self.q.dim(),
                self.r.dim(),
                self.r.dim(),
                sys.n(),
                sys.l()
            )));
        }
        Ok(())
    }
}

/// `N(mean, cov)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GaussianState {
    pub mean: Vec<f64>,
    pub cov: SymMatrix,
}

impl GaussianState {
    pub fn new(mean: Vec<f64>, cov: SymMatrix) -> Result<Self> {
        if mean.len() != cov.dim() {
            return Err(Error::DimensionMismatch(format!(
                "mean has {} entries, covariance is {}x{}",
                mean.len(),
                cov.dim(),
                cov.dim()
            )));
        }
        if let Some(v) = mean.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("mean entry {v}")));
        }
        psd_factor(&cov).map_err(|e| Error::NotPositiveSemidefinite(format!("covariance: {e}")))?;
        Ok(Self { mean, cov })
    }

    pub fn deterministic(x: Vec<f64>) -> Self {
        let n = x.len();
        Self { mean: x, cov: SymMatrix::zeros(n) }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `E[|X|_W²] = tr(W Σ) + μᵀ W μ`
    pub fn weighted_second_moment(&self, w: &SymMatrix) -> f64 {
        w.trace_product(&self.cov) + w.quad(&self.mean)
    }
}

/// First and second moments of a state/control pair at one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct JointMoments {
    pub state: GaussianState,
    pub control: GaussianState,
    /// `Cov(X, U)`, n×l.
    pub cross: Matrix,
}

/// `tr(QΣ_X) + μ_Xᵀ Q μ_X + tr(RΣ_U) + μ_Uᵀ R μ_U`.
pub fn stage_cost(cost: &QuadraticCost, moments: &JointMoments) -> f64 {
    moments.state.weighted_second_moment(&cost.q) + moments.control.weighted_second_moment(&cost.r)
}

/// Outcome of the structural checks on a problem.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub n: usize,
    pub l: usize,
    pub dimensions_ok: bool,
    /// Riccati iteration for `(A, B, I, I)` converged.
    pub stabilizable: bool,
    /// Riccati iteration for the dual pair `(Aᵀ, Q^{1/2}ᵀ)` converged.
    pub detectable: bool,
    /// Both flags come from iteration-convergence proxies, not rank tests.
    pub proxy: bool,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.dimensions_ok && self.stabilizable && self.detectable
    }
}

pub const VALIDATION_MAX_ITERATIONS: usize = 10_000;

pub fn validate(sys: &LtiStochasticSystem, cost: &QuadraticCost) -> Result<ValidationReport> {
    cost.check_dims(sys)?;
    let n = sys.n();
    let l = sys.l();
    let stabilizable = riccati::value_iteration(
        sys.a(),
        sys.b(),
        &SymMatrix::identity(n),
        &SymMatrix::identity(l),
        VALIDATION_MAX_ITERATIONS,
    )
    .is_ok();
    // Q = L Lᵀ, so Q^{1/2}-factor C = Lᵀ and the dual input matrix is Cᵀ = L.
    let l_factor = psd_factor(cost.q()).map_err(|e| Error::NotPositiveSemidefinite(format!("Q: {e}")))?;
    let detectable = riccati::value_iteration(
        &sys.a().transpose(),
        &l_factor,
        &SymMatrix::identity(n),
        &SymMatrix::identity(n),
        VALIDATION_MAX_ITERATIONS,
    )
    .is_ok();
    Ok(ValidationReport { n, l, dimensions_ok: true, stabilizable, detectable, proxy: true })
}

/// Control applied at one step: `U = F_x X + F_s Xˢ + g`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AffineStep {
    pub state_gain: Matrix,
    pub stationary_gain: Matrix,
    pub offset: Vec<f64>,
}

impl AffineStep {
    pub fn feedback(k: &Matrix) -> Self {
        let (l, n) = k.shape();
        Self { state_gain: k.clone(), stationary_gain: Matrix::zeros(l, n), offset: vec![0.0; l] }
    }

    /// `[F_x, F_s]`, l×2n.
    pub fn augmented_gain(&self) -> Matrix {
        Matrix::hstack(&[&self.state_gain, &self.stationary_gain])
    }

    pub fn apply(&self, x: &[f64], xs: &[f64]) -> Vec<f64> {
        let a = self.state_gain.mul_vec(x);
        let b = self.stationary_gain.mul_vec(xs);
        a.iter().zip(&b).zip(&self.offset).map(|((p, q), g)| p + q + g).collect()
    }
}

/// Time-varying control law, affine in the augmented state `(X, Xˢ)`. Every
/// control used here (Riccati schedules, steady feedback, perturbations of
/// either) has this form, which keeps all moments exactly Gaussian.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AffineControl {
    n: usize,
    l: usize,
    steps: Vec<AffineStep>,
}

impl AffineControl {
    pub fn new(n: usize, l: usize, steps: Vec<AffineStep>) -> Result<Self> {
        for (k, s) in steps.iter().enumerate() {
            if s.state_gain.shape() != (l, n)
                || s.stationary_gain.shape() != (l, n)
                || s.offset.len() != l
            {
                return Err(Error::DimensionMismatch(format!("control step {k} has wrong shape")));
            }
        }
        Ok(Self { n, l, steps })
    }

    /// `U(k) = K_N(k) X(k)`
    pub fn from_schedule(schedule: &GainSchedule) -> Self {
        let steps: Vec<AffineStep> = schedule.gains().iter().map(AffineStep::feedback).collect();
        let (l, n) = schedule.gains()[0].shape();
        Self { n, l, steps }
    }

    /// `U(k) = K X(k)` for `k < horizon`.
    pub fn steady(k: &Matrix, horizon: usize) -> Self {
        let (l, n) = k.shape();
        Self { n, l, steps: vec![AffineStep::feedback(k); horizon] }
    }

    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn step(&self, k: usize) -> &AffineStep {
        &self.steps[k]
    }

    pub fn steps(&self) -> &[AffineStep] {
        &self.steps
    }

    /// The first `horizon` steps.
    pub fn truncated(&self, horizon: usize) -> Result<Self> {
        if horizon > self.steps.len() {
            return Err(Error::HorizonMismatch(format!(
                "control covers {} steps, {horizon} requested",
                self.steps.len()
            )));
        }
        Ok(Self { n: self.n, l: self.l, steps: self.steps[..horizon].to_vec() })
    }

    /// `U(k) + V(k)`.
    pub fn perturbed(&self, v: &Perturbation) -> Result<Self> {
        v.check_dims(self.n, self.l)?;
        let steps = self
            .steps
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let w = v.schedule.weight(k);
                AffineStep {
                    state_gain: &s.state_gain + &v.state_gain.scale(w),
                    stationary_gain: &s.stationary_gain + &v.stationary_gain.scale(w),
                    offset: s.offset.iter().zip(&v.offset).map(|(a, b)| a + w * b).collect(),
                }
            })
            .collect();
        Ok(Self { n: self.n, l: self.l, steps })
    }
}

/// Time profile multiplying a [`Perturbation`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Schedule {
    Constant,
    /// Active only at the given step.
    Impulse(usize),
    /// Weight `r^k`.
    Geometric(f64),
}

impl Schedule {
    pub fn weight(&self, k: usize) -> f64 {
        match *self {
            Schedule::Constant => 1.0,
            Schedule::Impulse(at) => f64::from(u8::from(k == at)),
            Schedule::Geometric(r) => r.powi(k as i32),
        }
    }
}

/// `V(k) = s(k) (G_x X(k) + G_s Xˢ(k) + c)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Perturbation {
    pub state_gain: Matrix,
    pub stationary_gain: Matrix,
    pub offset: Vec<f64>,
    pub schedule: Schedule,
}

impl Perturbation {
    pub fn offset_only(offset: Vec<f64>, n: usize, schedule: Schedule) -> Self {
        let l = offset.len();
        Self { state_gain: Matrix::zeros(l, n), stationary_gain: Matrix::zeros(l, n), offset, schedule }
    }

    pub fn state_feedback(gain: Matrix, schedule: Schedule) -> Self {
        let (l, n) = gain.shape();
        Self { state_gain: gain, stationary_gain: Matrix::zeros(l, n), offset: vec![0.0; l], schedule }
    }

    fn check_dims(&self, n: usize, l: usize) -> Result<()> {
        if self.state_gain.shape() != (l, n)
            || self.stationary_gain.shape() != (l, n)
            || self.offset.len() != l
        {
            return Err(Error::DimensionMismatch("perturbation shape does not match the control".into()));
        }
        Ok(())
    }
}

/// Problem file: `{ "A", "B", "Q", "R", "Sigma_W", "x0_mean", "x0_cov" }`,
/// matrices as row-major nested arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
    #[serde(rename = "Q")]
    pub q: Vec<Vec<f64>>,
    #[serde(rename = "R")]
    pub r: Vec<Vec<f64>>,
    #[serde(rename = "Sigma_W")]
    pub sigma_w: Vec<Vec<f64>>,
    pub x0_mean: Vec<f64>,
    pub x0_cov: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    pub system: LtiStochasticSystem,
    pub cost: QuadraticCost,
    pub init: GaussianState,
}

impl Problem {
    pub fn from_spec(spec: &ProblemSpec) -> Result<Self> {
        let system = LtiStochasticSystem::new(
            Matrix::from_rows(&spec.a)?,
            Matrix::from_rows(&spec.b)?,
            SymMatrix::from_rows(&spec.sigma_w)?,
        )?;
        let cost = QuadraticCost::new(SymMatrix::from_rows(&spec.q)?, SymMatrix::from_rows(&spec.r)?)?;
        cost.check_dims(&system)?;
        let init = GaussianState::new(spec.x0_mean.clone(), SymMatrix::from_rows(&spec.x0_cov)?)?;
        if init.dim() != system.n() {
            return Err(Error::DimensionMismatch(format!(
                "x0 has dimension {}, system has n = {}",
                init.dim(),
                system.n()
            )));
        }
        Ok(Self { system, cost, init })
    }

    pub fn to_spec(&self) -> ProblemSpec {
        ProblemSpec {
            a: self.system.a().to_rows(),
            b: self.system.b().to_rows(),
            q: self.cost.q().to_rows(),
            r: self.cost.r().to_rows(),
            sigma_w: self.system.sigma_w().to_rows(),
            x0_mean: self.init.mean.clone(),
            x0_cov: self.init.cov.to_rows(),
        }
    }

    /// `X(k+1) = 1.2 X(k) + U(k) + W(k)`, `Q = 1`, `R = 5`, `Σ_W = 10`,
    /// `X₀ ~ N(3, 1.5)`.
    pub fn scalar_example() -> Self {
        Self {
            system: LtiStochasticSystem::new(Matrix::scalar(1.2), Matrix::scalar(1.0), SymMatrix::scalar(10.0))
                .expect("valid scalar system"),
            cost: QuadraticCost::new(SymMatrix::scalar(1.0), SymMatrix::scalar(5.0)).expect("valid cost"),
            init: GaussianState::new(vec![3.0], SymMatrix::scalar(1.5)).expect("valid initial state"),
        }
    }

    /// Seeded random instance with `Q ≻ 0`, `R ≻ 0` and entries of order one.
    /// `A` is a Gaussian matrix rescaled to spectral radius `r ∈ (0.5, 1.3)`,
    /// so many instances are open-loop unstable.
    pub fn random(seed: u64, n: usize, l: usize) -> Self {
        let stream = NormalStream::new(seed, 0);
        let mut next = {
            let mut i = 0usize;
            move || {
                i += 1;
                stream.normal(i, 0, 1)
            }
        };
        let mut gaussian = |rows: usize, cols: usize| {
            let data: Vec<f64> = (0..rows * cols).map(|_| next()).collect();
            Matrix::new(rows, cols, data).expect("finite samples")
        };
        let g = gaussian(n, n);
        let c = gaussian(n, n);
        let b = gaussian(n, l);
        let d = gaussian(l, l);
        let e = gaussian(n, n);
        let f = gaussian(n, n);
        let mean = gaussian(n, 1).as_slice().to_vec();
        let u = gaussian(1, 1)[(0, 0)];
        let radius = 0.9 + 0.4 * u.tanh();
        let rho = spectral_radius_estimate(&g).ok().filter(|r| *r > 1e-3).unwrap_or((n as f64).sqrt());
        let a = g.scale(radius / rho);
        let gram = |m: &Matrix, k: usize| SymMatrix::symmetrize(&(m * &m.transpose()).scale(1.0 / k as f64));
        let q = gram(&c, n).shift(0.1);
        let r = gram(&d, l).shift(0.5);
        let sigma_w = gram(&e, n);
        let x0_cov = gram(&f, n);
        Self {
            system: LtiStochasticSystem::new(a, b, sigma_w).expect("consistent random system"),
            cost: QuadraticCost::new(q, r).expect("positive definite weights"),
            init: GaussianState::new(mean, x0_cov).expect("valid initial law"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_sys(a: f64, b: f64) -> LtiStochasticSystem {
        LtiStochasticSystem::new(Matrix::scalar(a), Matrix::scalar(b), SymMatrix::scalar(1.0)).unwrap()
    }

    fn unit_cost() -> QuadraticCost {
        QuadraticCost::new(SymMatrix::scalar(1.0), SymMatrix::scalar(5.0)).unwrap()
    }

    #[test]
    fn validate_scalar_example() {
        let p = Problem::scalar_example();
        let rep = validate(&p.system, &p.cost).unwrap();
        assert!(rep.stabilizable && rep.detectable && rep.proxy && rep.is_ok());
    }

    #[test]
    fn validate_uncontrollable_modes() {
        assert!(!validate(&scalar_sys(2.0, 0.0), &unit_cost()).unwrap().stabilizable);
        assert!(validate(&scalar_sys(0.5, 0.0), &unit_cost()).unwrap().stabilizable);
    }

    #[test]
    fn validate_detectability() {
        let zero_q = QuadraticCost::new(SymMatrix::scalar(0.0), SymMatrix::scalar(1.0)).unwrap();
        assert!(!validate(&scalar_sys(2.0, 1.0), &zero_q).unwrap().detectable);
        assert!(validate(&scalar_sys(0.9, 1.0), &zero_q).unwrap().detectable);
    }

    #[test]
    fn validate_rejects_mismatched_cost() {
        let cost = QuadraticCost::new(SymMatrix::identity(2), SymMatrix::scalar(1.0)).unwrap();
        assert!(matches!(validate(&scalar_sys(1.0, 1.0), &cost), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn construction_errors() {
        assert!(LtiStochasticSystem::new(Matrix::zeros(2, 3), Matrix::zeros(2, 1), SymMatrix::zeros(2)).is_err());
        assert!(LtiStochasticSystem::new(Matrix::scalar(1.0), Matrix::zeros(2, 1), SymMatrix::zeros(1)).is_err());
        assert!(LtiStochasticSystem::new(Matrix::scalar(1.0), Matrix::scalar(1.0), SymMatrix::scalar(-1.0)).is_err());
        assert!(QuadraticCost::new(SymMatrix::scalar(1.0), SymMatrix::scalar(0.0)).is_err());
        assert!(QuadraticCost::new(SymMatrix::scalar(-1.0), SymMatrix::scalar(1.0)).is_err());
        // singular but PSD Q is fine
        assert!(QuadraticCost::new(SymMatrix::from_diag(&[1e6, 0.0]), SymMatrix::scalar(1.0)).is_ok());
    }

    fn moments(mx: f64, vx: f64, mu: f64, vu: f64) -> JointMoments {
        JointMoments {
            state: GaussianState::new(vec![mx], SymMatrix::scalar(vx)).unwrap(),
            control: GaussianState::new(vec![mu], SymMatrix::scalar(vu)).unwrap(),
            cross: Matrix::zeros(1, 1),
        }
    }

    #[test]
    fn stage_cost_examples() {
        let cost = unit_cost();
        assert_eq!(stage_cost(&cost, &moments(0.0, 0.0, 0.0, 0.0)), 0.0);
        assert!((stage_cost(&cost, &moments(3.0, 1.5, 0.0, 0.0)) - 10.5).abs() < 1e-14);
        // stationary pair of the scalar example: Σ = 17, U = K X
        let k = -0.55826_f64;
        let c = stage_cost(&cost, &moments(0.0, 17.0, 0.0, k * k * 17.0));
        assert!((c - 17.0 * (1.0 + 5.0 * k * k)).abs() < 1e-12);
        assert!((c - 43.49).abs() < 0.01);
    }

    #[test]
    fn stage_cost_ignores_asymmetry_below_tolerance() {
        let cost = QuadraticCost::new(SymMatrix::identity(2), SymMatrix::scalar(1.0)).unwrap();
        let raw = Matrix::from_rows(&[vec![2.0, 0.3], vec![0.3 + 1e-13, 1.0]]).unwrap();
        let sym_cov = SymMatrix::new(raw.clone()).unwrap();
        let swapped = SymMatrix::new(raw.transpose()).unwrap();
        let a = JointMoments {
            state: GaussianState::new(vec![1.0, -1.0], sym_cov).unwrap(),
            control: GaussianState::deterministic(vec![0.5]),
            cross: Matrix::zeros(2, 1),
        };
        let mut b = a.clone();
        b.state.cov = swapped;
        assert_eq!(stage_cost(&cost, &a), stage_cost(&cost, &b));
    }

    #[test]
    fn perturbation_schedules() {
        assert_eq!(Schedule::Impulse(2).weight(2), 1.0);
        assert_eq!(Schedule::Impulse(2).weight(3), 0.0);
        assert!((Schedule::Geometric(0.5).weight(3) - 0.125).abs() < 1e-15);
        let base = AffineControl::steady(&Matrix::scalar(-0.5), 4);
        let v = Perturbation::offset_only(vec![0.5], 1, Schedule::Impulse(0));
        let u = base.perturbed(&v).unwrap();
        assert_eq!(u.step(0).offset, vec![0.5]);
        assert_eq!(u.step(1).offset, vec![0.0]);
        assert_eq!(u.step(0).apply(&[2.0], &[7.0]), vec![-0.5]);
    }

    #[test]
    fn problem_spec_round_trip() {
        let p = Problem::scalar_example();
        assert_eq!(Problem::from_spec(&p.to_spec()).unwrap(), p);
    }
}
