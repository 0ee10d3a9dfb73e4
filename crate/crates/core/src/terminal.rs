//! Offline design of the auxiliary feedback gain, terminal weight and
//! terminal level, plus the checks that certify a design.
//!
//! The gain is the discrete LQR gain for the stage weights inflated by the
//! neighbor term, `Q_f` solves the discrete Lyapunov equation with a
//! strictness margin, and the level is the largest one for which the
//! ellipsoid satisfies the constraints and the sampled one-step decrease
//! of the plant.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{self, ConstraintSets, VehicleInput, VehicleParams, VehicleState, INPUT_DIM, STATE_DIM};

#[derive(Debug, Error, PartialEq)]
pub enum TerminalError {
    #[error("no stabilizing gain found: {0}")]
    NotStabilizable(String),
    #[error("matrix dimensions inconsistent: {0}")]
    Dimension(&'static str),
    #[error("Lyapunov equation is singular")]
    SingularLyapunov,
    #[error("operating point violates a constraint, terminal level would be empty")]
    EmptyLevel,
}

/// Linear model `z+ = A z + B v`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TerminalWeights {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub s: DMatrix<f64>,
    /// Number of agents `N`; the neighbor weight enters as `(N - 1) S`.
    pub n_agents: usize,
}

impl TerminalWeights {
    fn stage_state_weight(&self) -> DMatrix<f64> {
        &self.q + &self.s * (self.n_agents.saturating_sub(1) as f64)
    }
}

/// One linear constraint `lo <= offset + row . z <= hi` on the error
/// coordinates, where `row` is a gain row (input) or a unit vector (state).
#[derive(Debug, Clone, PartialEq)]
pub enum ConstraintRow {
    Input(usize),
    State(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearConstraint {
    pub row: ConstraintRow,
    pub offset: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Error dynamics used to validate the level against the true plant.
pub trait ErrorDynamics {
    fn step_error(&self, z: &DVector<f64>, v: &DVector<f64>) -> DVector<f64>;
}

impl ErrorDynamics for LinearModel {
    fn step_error(&self, z: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        &self.a * z + &self.b * v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisOptions {
    /// `epsilon` in `A_c^T Q_f A_c - Q_f = -(stage) - epsilon I`.
    pub strictness: f64,
    /// Bisection iterations for the level search.
    pub level_iterations: usize,
    /// Directions sampled per level when checking the plant decrease.
    pub decrease_samples: usize,
    /// Fraction of the strictness margin the plant must retain.
    pub decrease_fraction: f64,
    pub seed: u64,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        Self {
            strictness: 0.1,
            level_iterations: 40,
            decrease_samples: 400,
            decrease_fraction: 0.0,
            seed: 0x7e57,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TerminalDesign {
    /// Feedback gain, `m x n`; the auxiliary law is `v = K z`.
    pub k: DMatrix<f64>,
    /// Terminal weight, symmetric positive definite.
    pub q_f: DMatrix<f64>,
    /// Terminal level `a`.
    pub level: f64,
    /// Largest eigenvalue of the Lyapunov-inequality residual.
    pub margin: f64,
}

impl TerminalDesign {
    pub fn terminal_cost(&self, z: &DVector<f64>) -> f64 {
        quad(&self.q_f, z)
    }
}

fn quad(m: &DMatrix<f64>, z: &DVector<f64>) -> f64 {
    (z.transpose() * m * z)[(0, 0)]
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Discrete LQR gain `K` (with `u = K x`) by Riccati fixed-point iteration.
pub fn dlqr(model: &LinearModel, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>, TerminalError> {
    let (a, b) = (&model.a, &model.b);
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n || q.shape() != (n, n) || r.shape() != (b.ncols(), b.ncols()) {
        return Err(TerminalError::Dimension("dlqr"));
    }
    let mut p = q.clone();
    for _ in 0..200_000 {
        let btp = b.transpose() * &p;
        let gram = r + &btp * b;
        let inv = gram
            .clone()
            .try_inverse()
            .ok_or_else(|| TerminalError::NotStabilizable("singular R + B'PB".into()))?;
        let next = symmetrize(&(q + a.transpose() * &p * a - a.transpose() * &p * b * &inv * &btp * a));
        if !next.iter().all(|v| v.is_finite()) {
            return Err(TerminalError::NotStabilizable("Riccati iteration diverged".into()));
        }
        let delta = (&next - &p).abs().max();
        let scale = next.abs().max().max(1.0);
        p = next;
        if delta <= 1e-13 * scale {
            let btp = b.transpose() * &p;
            let inv = (r + &btp * b).try_inverse().expect("checked above");
            return Ok(-(inv * btp * a));
        }
    }
    Err(TerminalError::NotStabilizable("Riccati iteration did not converge".into()))
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max)
}

/// Solves `A^T X A - X = -M` for symmetric `X`.
pub fn solve_discrete_lyapunov(a: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<DMatrix<f64>, TerminalError> {
    let n = a.nrows();
    let at = a.transpose();
    let lhs = at.kronecker(&at) - DMatrix::<f64>::identity(n * n, n * n);
    let rhs = -DVector::from_column_slice(m.as_slice());
    let sol = lhs.lu().solve(&rhs).ok_or(TerminalError::SingularLyapunov)?;
    Ok(symmetrize(&DMatrix::from_column_slice(n, n, sol.as_slice())))
}

fn residual(d: &TerminalDesign, model: &LinearModel, w: &TerminalWeights) -> DMatrix<f64> {
    let ac = &model.a + &model.b * &d.k;
    let res = ac.transpose() * &d.q_f * &ac - &d.q_f + w.stage_state_weight() + d.k.transpose() * &w.r * &d.k;
    symmetrize(&res)
}

/// Largest eigenvalue of `A_c^T Q_f A_c - Q_f + Q + K^T R K + (N-1) S`;
/// non-positive means the Lyapunov inequality holds.
pub fn verify(d: &TerminalDesign, model: &LinearModel, w: &TerminalWeights) -> f64 {
    SymmetricEigen::new(residual(d, model, w)).eigenvalues.max()
}

pub fn in_terminal_set(z: &DVector<f64>, d: &TerminalDesign) -> bool {
    d.terminal_cost(z) <= d.level
}

/// Largest level for which the linear constraints hold on the whole
/// ellipsoid (support-function bound).
fn constraint_level(k: &DMatrix<f64>, q_f: &DMatrix<f64>, constraints: &[LinearConstraint]) -> Result<f64, TerminalError> {
    let n = q_f.nrows();
    let q_inv = q_f
        .clone()
        .cholesky()
        .ok_or(TerminalError::Dimension("terminal weight not positive definite"))?
        .inverse();
    let mut level = f64::INFINITY;
    for c in constraints {
        let row: DVector<f64> = match c.row {
            ConstraintRow::Input(i) => {
                if i >= k.nrows() {
                    return Err(TerminalError::Dimension("input constraint index"));
                }
                k.row(i).transpose()
            }
            ConstraintRow::State(j) => {
                if j >= n {
                    return Err(TerminalError::Dimension("state constraint index"));
                }
                DVector::from_fn(n, |r, _| if r == j { 1.0 } else { 0.0 })
            }
        };
        if c.offset < c.lo || c.offset > c.hi {
            return Err(TerminalError::EmptyLevel);
        }
        let sigma = quad(&q_inv, &row);
        if sigma <= 0.0 {
            continue;
        }
        let room = (c.hi - c.offset).min(c.offset - c.lo);
        level = level.min(room * room / sigma);
    }
    Ok(level)
}

/// Sample points of the ellipsoid shell `z' Q_f z = level * rho^2`.
fn shell_samples(q_f: &DMatrix<f64>, count: usize, seed: u64) -> Vec<DVector<f64>> {
    let n = q_f.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let v = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let norm = quad(q_f, &v).sqrt();
            v / norm
        })
        .collect()
}

fn plant_decrease_ok(
    plant: &dyn ErrorDynamics,
    k: &DMatrix<f64>,
    q_f: &DMatrix<f64>,
    w: &TerminalWeights,
    level: f64,
    directions: &[DVector<f64>],
    slack: f64,
) -> bool {
    let stage_x = w.stage_state_weight();
    for dir in directions {
        for rho in [0.25, 0.5, 0.75, 1.0] {
            let z = dir * (rho * level.sqrt());
            let v = k * &z;
            let zn = plant.step_error(&z, &v);
            let lhs = quad(q_f, &zn) - quad(q_f, &z) + quad(&stage_x, &z) + quad(&w.r, &v);
            if !(lhs <= -slack * z.norm_squared()) {
                return false;
            }
        }
    }
    true
}

/// Synthesizes `(K, Q_f, a)` for the linear model. When `plant` is given,
/// the level is additionally bisected until the plant's one-step decrease
/// holds on sampled shells of the ellipsoid.
pub fn synthesize(
    model: &LinearModel,
    w: &TerminalWeights,
    constraints: &[LinearConstraint],
    plant: Option<&dyn ErrorDynamics>,
    opts: &SynthesisOptions,
) -> Result<TerminalDesign, TerminalError> {
    let n = model.a.nrows();
    if w.s.shape() != (n, n) {
        return Err(TerminalError::Dimension("neighbor weight"));
    }
    let stage_x = w.stage_state_weight();
    let k = dlqr(model, &stage_x, &w.r)?;
    let ac = &model.a + &model.b * &k;
    let rho = spectral_radius(&ac);
    if !(rho < 1.0) {
        return Err(TerminalError::NotStabilizable(format!("closed-loop spectral radius {rho}")));
    }
    let m = &stage_x + k.transpose() * &w.r * &k + DMatrix::<f64>::identity(n, n) * opts.strictness;
    let q_f = solve_discrete_lyapunov(&ac, &m)?;
    if q_f.clone().cholesky().is_none() {
        return Err(TerminalError::NotStabilizable("terminal weight not positive definite".into()));
    }

    let a_max = constraint_level(&k, &q_f, constraints)?;
    let level = match plant {
        None => a_max,
        Some(plant) => {
            let dirs = shell_samples(&q_f, opts.decrease_samples, opts.seed);
            let slack = opts.decrease_fraction * opts.strictness;
            // unconstrained problems still need a finite search interval
            let mut hi = if a_max.is_finite() { a_max } else { 1e6 };
            if plant_decrease_ok(plant, &k, &q_f, w, hi, &dirs, slack) {
                hi
            } else {
                let mut lo = 0.0;
                for _ in 0..opts.level_iterations {
                    let mid = 0.5 * (lo + hi);
                    if plant_decrease_ok(plant, &k, &q_f, w, mid, &dirs, slack) {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                lo
            }
        }
    };

    let mut design = TerminalDesign {
        k,
        q_f,
        level,
        margin: 0.0,
    };
    design.margin = verify(&design, model, w);
    Ok(design)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TerminalAudit {
    pub samples: usize,
    pub steps: usize,
    /// Successor states that left the terminal set.
    pub set_violations: usize,
    pub constraint_violations: usize,
    /// Steps where `h_f(z+) - h_f(z) + l(z) > 1e-8`.
    pub decrease_violations: usize,
    pub worst_decrease: f64,
}

impl TerminalAudit {
    pub fn passed(&self) -> bool {
        self.set_violations == 0 && self.constraint_violations == 0 && self.decrease_violations == 0
    }
}

fn constraint_row_ok(c: &LinearConstraint, k: &DMatrix<f64>, z: &DVector<f64>) -> bool {
    let value = c.offset
        + match c.row {
            ConstraintRow::Input(i) => (k.row(i) * z)[(0, 0)],
            ConstraintRow::State(j) => z[j],
        };
    value >= c.lo && value <= c.hi
}

/// Simulates the closed loop `z+ = f(z, K z)` from random states inside
/// the terminal set and counts invariance, constraint and decrease
/// violations.
pub fn audit(
    d: &TerminalDesign,
    plant: &dyn ErrorDynamics,
    w: &TerminalWeights,
    constraints: &[LinearConstraint],
    samples: usize,
    steps: usize,
    seed: u64,
) -> TerminalAudit {
    let n = d.q_f.nrows();
    let stage_x = w.stage_state_weight();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dirs = shell_samples(&d.q_f, samples, seed ^ 0x5eed);
    let mut out = TerminalAudit {
        samples,
        steps,
        set_violations: 0,
        constraint_violations: 0,
        decrease_violations: 0,
        worst_decrease: f64::NEG_INFINITY,
    };
    for dir in dirs {
        let radius = rng.random_range(0.0f64..1.0).powf(1.0 / n as f64) * d.level.sqrt();
        let mut z = dir * radius;
        for _ in 0..steps {
            let v = &d.k * &z;
            if !constraints.iter().all(|c| constraint_row_ok(c, &d.k, &z)) {
                out.constraint_violations += 1;
            }
            let zn = plant.step_error(&z, &v);
            let dec = quad(&d.q_f, &zn) - quad(&d.q_f, &z) + quad(&stage_x, &z) + quad(&w.r, &v);
            out.worst_decrease = out.worst_decrease.max(dec);
            if dec > 1e-8 {
                out.decrease_violations += 1;
            }
            if !in_terminal_set(&zn, d) {
                out.set_violations += 1;
            }
            z = zn;
        }
    }
    out
}

/// Error dynamics of the vehicle about a straight constant-speed cruise
/// along +x: `z+ = f(r + z, u0 + v) - f(r, u0)`.
#[derive(Debug, Clone)]
pub struct CruiseErrorDynamics {
    pub params: VehicleParams<f64>,
    pub speed: f64,
}

impl CruiseErrorDynamics {
    pub fn reference(&self) -> (VehicleState<f64>, VehicleInput<f64>) {
        let u0 = self.params.cruise_thrust(self.speed);
        (
            VehicleState {
                vx: self.speed,
                ..Default::default()
            },
            VehicleInput::new(u0, u0),
        )
    }

    pub fn linearize(&self) -> LinearModel {
        let (r, u0) = self.reference();
        let (a, b) = dynamics::linearize(&r, &u0, &self.params);
        LinearModel {
            a: DMatrix::from_fn(STATE_DIM, STATE_DIM, |i, j| a[i][j]),
            b: DMatrix::from_fn(STATE_DIM, INPUT_DIM, |i, j| b[i][j]),
        }
    }

    /// Input and heading-rate bounds expressed on the error coordinates.
    pub fn constraints(&self, c: &ConstraintSets<f64>) -> Vec<LinearConstraint> {
        let (r, u0) = self.reference();
        let u0 = u0.to_array();
        let mut out: Vec<LinearConstraint> = (0..INPUT_DIM)
            .map(|i| LinearConstraint {
                row: ConstraintRow::Input(i),
                offset: u0[i],
                lo: c.u_min[i],
                hi: c.u_max[i],
            })
            .collect();
        out.push(LinearConstraint {
            row: ConstraintRow::State(5),
            offset: r.omega,
            lo: -c.omega_max,
            hi: c.omega_max,
        });
        out
    }
}

impl ErrorDynamics for CruiseErrorDynamics {
    fn step_error(&self, z: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        let (r, u0) = self.reference();
        let r = r.to_array();
        let u0 = u0.to_array();
        let x: [f64; STATE_DIM] = std::array::from_fn(|i| r[i] + z[i]);
        let u: [f64; INPUT_DIM] = std::array::from_fn(|i| u0[i] + v[i]);
        let next = dynamics::rk4_step(&x, &u, &self.params);
        let base = dynamics::rk4_step(&r, &u0, &self.params);
        DVector::from_fn(STATE_DIM, |i, _| next[i] - base[i])
    }
}
