//! Receding-horizon problem of one agent: cost evaluation, single-shooting
//! transcription with adjoint gradients, a projected quasi-Newton solver,
//! the auxiliary terminal law and warm-start shifting.

use std::f64::consts::PI;

use nalgebra::{Matrix2, Matrix6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::collision::{self, CollisionError, SpatialFilter};
use crate::dynamics::{self, ConstraintSets, Mat6, Mat62, VehicleParams, INPUT_DIM, STATE_DIM};
use crate::terminal::TerminalDesign;

pub type State = [f64; STATE_DIM];
pub type Input = [f64; INPUT_DIM];
pub type Mat2 = [[f64; INPUT_DIM]; INPUT_DIM];
/// Row-major `2 x 6` feedback gain.
pub type Gain = [[f64; STATE_DIM]; INPUT_DIM];

#[derive(Debug, Error)]
pub enum NmpcError {
    #[error("dimension mismatch: {0}")]
    Dimension(&'static str),
    #[error("invalid problem: {0}")]
    InvalidProblem(&'static str),
    #[error(transparent)]
    Collision(#[from] CollisionError),
    #[error("non-finite state or cost")]
    NonFinite,
    #[error("no constraint-satisfying control sequence found")]
    Infeasible { best: Box<PlannedSolution> },
}

pub fn wrap_angle(a: f64) -> f64 {
    (a + PI).rem_euclid(2.0 * PI) - PI
}

/// `x - r` with the heading difference wrapped to `[-pi, pi)`.
pub fn tracking_error(x: &State, r: &State) -> State {
    let mut e: State = std::array::from_fn(|i| x[i] - r[i]);
    e[4] = wrap_angle(e[4]);
    e
}

/// Maps world-frame position and velocity errors into the frame of a
/// reference heading; heading and heading rate pass through.
fn frame(heading: f64) -> Mat6<f64> {
    let (s, c) = heading.sin_cos();
    let mut t = [[0.0; STATE_DIM]; STATE_DIM];
    for b in [0, 2] {
        t[b][b] = c;
        t[b][b + 1] = s;
        t[b + 1][b] = -s;
        t[b + 1][b + 1] = c;
    }
    t[4][4] = 1.0;
    t[5][5] = 1.0;
    t
}

fn mat_vec(m: &Mat6<f64>, v: &State) -> State {
    std::array::from_fn(|i| (0..STATE_DIM).map(|j| m[i][j] * v[j]).sum())
}

fn quad(m: &Mat6<f64>, v: &State) -> f64 {
    let mv = mat_vec(m, v);
    (0..STATE_DIM).map(|i| v[i] * mv[i]).sum()
}

fn quad2(m: &Mat2, u: &Input) -> f64 {
    let mut s = 0.0;
    for i in 0..INPUT_DIM {
        for j in 0..INPUT_DIM {
            s += u[i] * m[i][j] * u[j];
        }
    }
    s
}

fn symmetric_pd6(m: &Mat6<f64>) -> bool {
    let n = Matrix6::from_fn(|i, j| m[i][j]);
    (n - n.transpose()).abs().max() <= 1e-12 * n.abs().max().max(1.0) && n.cholesky().is_some()
}

fn symmetric_pd2(m: &Mat2) -> bool {
    let n = Matrix2::from_fn(|i, j| m[i][j]);
    (n - n.transpose()).abs().max() <= 1e-12 * n.abs().max().max(1.0) && n.cholesky().is_some()
}

pub fn diag6(d: [f64; STATE_DIM]) -> Mat6<f64> {
    std::array::from_fn(|i| std::array::from_fn(|j| if i == j { d[i] } else { 0.0 }))
}

pub fn diag2(d: [f64; INPUT_DIM]) -> Mat2 {
    std::array::from_fn(|i| std::array::from_fn(|j| if i == j { d[i] } else { 0.0 }))
}

/// Local law `u = clamp(u_ff + K T(theta_r) (x - r))`, with the gain and
/// terminal weight designed about a cruise along +x and rotated into the
/// reference heading.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxiliaryLaw {
    pub gain: Gain,
    pub terminal_weight: Mat6<f64>,
    pub level: f64,
}

impl AuxiliaryLaw {
    pub fn from_design(d: &TerminalDesign) -> Result<Self, NmpcError> {
        if d.k.shape() != (INPUT_DIM, STATE_DIM) || d.q_f.shape() != (STATE_DIM, STATE_DIM) {
            return Err(NmpcError::Dimension("terminal design"));
        }
        Ok(Self {
            gain: std::array::from_fn(|i| std::array::from_fn(|j| d.k[(i, j)])),
            terminal_weight: std::array::from_fn(|i| std::array::from_fn(|j| d.q_f[(i, j)])),
            level: d.level,
        })
    }

    /// Gain and terminal weight expressed for a reference heading.
    pub fn scheduled(&self, heading: f64) -> (Gain, Mat6<f64>) {
        let t = frame(heading);
        let k = std::array::from_fn(|i| std::array::from_fn(|j| (0..STATE_DIM).map(|m| self.gain[i][m] * t[m][j]).sum()));
        let mut q = [[0.0; STATE_DIM]; STATE_DIM];
        for (i, row) in q.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let mut s = 0.0;
                for a in 0..STATE_DIM {
                    for b in 0..STATE_DIM {
                        s += t[a][i] * self.terminal_weight[a][b] * t[b][j];
                    }
                }
                *v = s;
            }
        }
        (k, q)
    }

    /// Thrust holding the reference speed against linear drag.
    pub fn feedforward(params: &VehicleParams<f64>, reference: &State) -> Input {
        let u = params.cruise_thrust(reference[2].hypot(reference[3]));
        [u, u]
    }

    pub fn raw_control(&self, x: &State, reference: &State, params: &VehicleParams<f64>) -> Input {
        let (k, _) = self.scheduled(reference[4]);
        let e = tracking_error(x, reference);
        let ff = Self::feedforward(params, reference);
        std::array::from_fn(|i| ff[i] + (0..STATE_DIM).map(|j| k[i][j] * e[j]).sum::<f64>())
    }

    pub fn control(&self, x: &State, reference: &State, params: &VehicleParams<f64>, c: &ConstraintSets<f64>) -> Input {
        c.clamp_input(self.raw_control(x, reference, params))
    }

    pub fn terminal_cost(&self, x: &State, reference: &State) -> f64 {
        let (_, q) = self.scheduled(reference[4]);
        quad(&q, &tracking_error(x, reference))
    }

    pub fn in_terminal_set(&self, x: &State, reference: &State) -> bool {
        self.terminal_cost(x, reference) <= self.level
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    pub max_iterations: usize,
    pub tolerance: f64,
    pub penalty_rounds: usize,
    pub penalty_initial: f64,
    pub penalty_growth: f64,
    /// Relative slack on the terminal level accepted by the hard check.
    pub terminal_slack: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            tolerance: 1e-6,
            penalty_rounds: 3,
            penalty_initial: 10.0,
            penalty_growth: 10.0,
            terminal_slack: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollisionSettings {
    pub r_min: f64,
    /// Filter weights by distance rank, one per sample of the window
    /// `k = 0..=N_p`.
    pub rank_weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NmpcProblem {
    pub horizon: usize,
    pub control_horizon: usize,
    pub params: VehicleParams<f64>,
    pub constraints: ConstraintSets<f64>,
    pub q: Mat6<f64>,
    pub r: Mat2,
    pub aux: AuxiliaryLaw,
    /// Alignment to the goal, `a^{i1}`; the tracked reference is `g - a`.
    pub goal_offset: State,
    pub collision: Option<CollisionSettings>,
    pub terminal_constraint: bool,
    pub solver: SolverSettings,
}

impl NmpcProblem {
    pub fn validate(&self) -> Result<(), NmpcError> {
        if self.control_horizon == 0 || self.control_horizon > self.horizon {
            return Err(NmpcError::InvalidProblem("need 1 <= N_c <= N_p"));
        }
        if !symmetric_pd6(&self.q) || !symmetric_pd2(&self.r) {
            return Err(NmpcError::InvalidProblem("Q and R must be symmetric positive definite"));
        }
        if !(self.aux.level >= 0.0) {
            return Err(NmpcError::InvalidProblem("terminal level must be non-negative"));
        }
        if let Some(c) = &self.collision {
            if c.rank_weights.len() != self.horizon + 1 {
                return Err(NmpcError::Dimension("collision filter length must be N_p + 1"));
            }
            if !(c.r_min > 0.0) {
                return Err(NmpcError::InvalidProblem("R_min must be positive"));
            }
        }
        self.params.validate().map_err(|_| NmpcError::InvalidProblem("vehicle parameters"))?;
        self.constraints.validate().map_err(|_| NmpcError::InvalidProblem("constraint sets"))?;
        Ok(())
    }

    pub fn references(&self, goal: &[State]) -> Vec<State> {
        goal.iter()
            .map(|g| {
                let mut r: State = std::array::from_fn(|i| g[i] - self.goal_offset[i]);
                r[4] = wrap_angle(r[4]);
                r
            })
            .collect()
    }
}

/// A neighbor's reconstructed trajectory on this agent's grid.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborEstimate {
    pub id: usize,
    /// `S^{ij}`.
    pub weight: Mat6<f64>,
    /// `a^{ij}`.
    pub offset: State,
    pub states: Vec<State>,
}

#[derive(Debug, Clone, Copy)]
pub struct Estimates<'a> {
    /// Goal trajectory `g_k`, `k = 0..=N_p`.
    pub goal: &'a [State],
    pub neighbors: &'a [NeighborEstimate],
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CostBreakdown {
    pub j: f64,
    pub phi: f64,
    pub j_mod: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannedSolution {
    pub controls: Vec<Input>,
    /// All applied inputs over the prediction horizon, tail included.
    pub inputs: Vec<Input>,
    pub states: Vec<State>,
    pub references: Vec<State>,
    pub cost: CostBreakdown,
    pub penalty: f64,
    pub feasible: bool,
    pub iterations: usize,
    /// The shifted warm start was returned instead of the optimizer result.
    pub fallback: bool,
    /// Neighbors whose repelling term was active during the solve.
    pub active_neighbors: Vec<usize>,
}

impl PlannedSolution {
    pub fn first_input(&self) -> Input {
        self.controls[0]
    }
}

struct Terms {
    j: f64,
    phi: f64,
    penalty: f64,
}

impl Terms {
    fn value(&self, rho: f64) -> f64 {
        if self.phi == 0.0 {
            self.j + rho * self.penalty
        } else {
            self.j * (1.0 + self.phi) + rho * self.penalty
        }
    }
}

struct Rollout {
    states: Vec<State>,
    inputs: Vec<Input>,
    a: Vec<Mat6<f64>>,
    b: Vec<Mat62<f64>>,
    /// Effective `du/dx` of the tail law, clamped rows zeroed.
    tail: Vec<Gain>,
}

/// Per-solve data: references, scheduled tail gains, neighbor targets and
/// the repelling filters frozen on the initial guess.
pub struct Transcription<'a> {
    prob: &'a NmpcProblem,
    x0: State,
    refs: Vec<State>,
    feedforward: Vec<Input>,
    gains: Vec<Gain>,
    terminal_weight: Mat6<f64>,
    targets: Vec<Vec<State>>,
    neighbor_weights: Vec<Mat6<f64>>,
    neighbor_ids: Vec<usize>,
    positions: Vec<Vec<[f64; 2]>>,
    filters: Vec<Option<SpatialFilter<f64>>>,
}

impl<'a> Transcription<'a> {
    /// Prepares the problem and freezes collision indicators and filter
    /// ranks on the rollout of `guess`.
    pub fn new(x0: &State, est: &Estimates, prob: &'a NmpcProblem, guess: &[Input]) -> Result<Self, NmpcError> {
        let mut tr = Self::unfrozen(x0, est, prob)?;
        if guess.len() != prob.control_horizon {
            return Err(NmpcError::Dimension("initial guess length must be N_c"));
        }
        let roll = tr.rollout(guess, false);
        tr.freeze(&roll.states)?;
        Ok(tr)
    }

    fn unfrozen(x0: &State, est: &Estimates, prob: &'a NmpcProblem) -> Result<Self, NmpcError> {
        prob.validate()?;
        let np = prob.horizon;
        if est.goal.len() != np + 1 {
            return Err(NmpcError::Dimension("goal trajectory must have N_p + 1 samples"));
        }
        if est.neighbors.iter().any(|n| n.states.len() != np + 1) {
            return Err(NmpcError::Dimension("neighbor trajectory must have N_p + 1 samples"));
        }
        if !x0.iter().all(|v| v.is_finite()) {
            return Err(NmpcError::NonFinite);
        }
        let refs = prob.references(est.goal);
        let feedforward = refs.iter().map(|r| AuxiliaryLaw::feedforward(&prob.params, r)).collect();
        let gains = refs[..np].iter().map(|r| prob.aux.scheduled(r[4]).0).collect();
        let terminal_weight = prob.aux.scheduled(refs[np][4]).1;
        let targets = est
            .neighbors
            .iter()
            .map(|n| {
                n.states
                    .iter()
                    .map(|w| {
                        let mut t: State = std::array::from_fn(|i| w[i] - n.offset[i]);
                        t[4] = wrap_angle(t[4]);
                        t
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            prob,
            x0: *x0,
            refs,
            feedforward,
            gains,
            terminal_weight,
            targets,
            neighbor_weights: est.neighbors.iter().map(|n| n.weight).collect(),
            neighbor_ids: est.neighbors.iter().map(|n| n.id).collect(),
            positions: est.neighbors.iter().map(|n| n.states.iter().map(|w| [w[0], w[1]]).collect()).collect(),
            filters: vec![None; est.neighbors.len()],
        })
    }

    fn distances(&self, states: &[State], j: usize) -> Vec<f64> {
        states
            .iter()
            .zip(&self.positions[j])
            .map(|(x, p)| (x[0] - p[0]).hypot(x[1] - p[1]))
            .collect()
    }

    fn freeze(&mut self, states: &[State]) -> Result<(), NmpcError> {
        let Some(c) = &self.prob.collision else {
            return Ok(());
        };
        for j in 0..self.positions.len() {
            let d = self.distances(states, j);
            self.filters[j] = if collision::on_collision_course(&d, c.r_min) {
                Some(SpatialFilter::ranked(&c.rank_weights, &d)?)
            } else {
                None
            };
        }
        Ok(())
    }

    pub fn active_neighbors(&self) -> Vec<usize> {
        self.filters
            .iter()
            .zip(&self.neighbor_ids)
            .filter_map(|(f, &id)| f.as_ref().map(|_| id))
            .collect()
    }

    pub fn references(&self) -> &[State] {
        &self.refs
    }

    fn rollout(&self, controls: &[Input], jacobians: bool) -> Rollout {
        let p = self.prob;
        let np = p.horizon;
        let nc = p.control_horizon;
        let mut states = Vec::with_capacity(np + 1);
        let mut inputs = Vec::with_capacity(np);
        let mut a = Vec::new();
        let mut b = Vec::new();
        let mut tail = Vec::new();
        let mut x = self.x0;
        states.push(x);
        for k in 0..np {
            let u = if k < nc {
                controls[k]
            } else {
                let e = tracking_error(&x, &self.refs[k]);
                let kg = &self.gains[k];
                let raw: Input = std::array::from_fn(|i| self.feedforward[k][i] + (0..STATE_DIM).map(|j| kg[i][j] * e[j]).sum::<f64>());
                let u = p.constraints.clamp_input(raw);
                if jacobians {
                    tail.push(std::array::from_fn(|i| {
                        if raw[i] < p.constraints.u_min[i] || raw[i] > p.constraints.u_max[i] {
                            [0.0; STATE_DIM]
                        } else {
                            kg[i]
                        }
                    }));
                }
                u
            };
            if jacobians {
                let (next, ak, bk) = dynamics::rk4_step_with_jacobians(&x, &u, &p.params);
                a.push(ak);
                b.push(bk);
                x = next;
            } else {
                x = dynamics::rk4_step(&x, &u, &p.params);
            }
            inputs.push(u);
            states.push(x);
        }
        Rollout {
            states,
            inputs,
            a,
            b,
            tail,
        }
    }

    fn terms(&self, states: &[State], inputs: &[Input]) -> Result<Terms, NmpcError> {
        let p = self.prob;
        let np = p.horizon;
        let mut j = 0.0;
        for k in 0..np {
            j += quad(&p.q, &tracking_error(&states[k], &self.refs[k]));
            j += quad2(&p.r, &inputs[k]);
            for (t, s) in self.targets.iter().zip(&self.neighbor_weights) {
                j += quad(s, &tracking_error(&states[k], &t[k]));
            }
        }
        let e_n = tracking_error(&states[np], &self.refs[np]);
        let h_f = quad(&self.terminal_weight, &e_n);
        j += h_f;

        let mut phi = 0.0;
        if let Some(c) = &p.collision {
            for (jn, f) in self.filters.iter().enumerate() {
                if let Some(f) = f {
                    phi += collision::potential_term(&self.distances(states, jn), f, c.r_min, true)?;
                }
            }
        }

        let mut penalty = 0.0;
        for x in &states[1..] {
            penalty += (x[5].abs() - p.constraints.omega_max).max(0.0);
            if let Some(bx) = p.constraints.position_box {
                penalty += (bx[0] - x[0]).max(0.0) + (x[0] - bx[1]).max(0.0) + (bx[2] - x[1]).max(0.0) + (x[1] - bx[3]).max(0.0);
            }
        }
        if p.terminal_constraint {
            penalty += (h_f - p.aux.level).max(0.0);
        }
        if !(j.is_finite() && phi.is_finite() && penalty.is_finite()) {
            return Err(NmpcError::NonFinite);
        }
        Ok(Terms { j, phi, penalty })
    }

    fn gradient(&self, roll: &Rollout, terms: &Terms, rho: f64) -> Vec<f64> {
        let p = self.prob;
        let np = p.horizon;
        let nc = p.control_horizon;
        let scale = 1.0 + terms.phi;
        let mut gx = vec![[0.0; STATE_DIM]; np + 1];
        let mut gu = vec![[0.0; INPUT_DIM]; np];
        for k in 0..np {
            let x = &roll.states[k];
            let mut g = mat_vec(&p.q, &tracking_error(x, &self.refs[k]));
            for (t, s) in self.targets.iter().zip(&self.neighbor_weights) {
                let gs = mat_vec(s, &tracking_error(x, &t[k]));
                for i in 0..STATE_DIM {
                    g[i] += gs[i];
                }
            }
            for i in 0..STATE_DIM {
                gx[k][i] = 2.0 * scale * g[i];
            }
            let u = &roll.inputs[k];
            for i in 0..INPUT_DIM {
                gu[k][i] = 2.0 * scale * (0..INPUT_DIM).map(|m| p.r[i][m] * u[m]).sum::<f64>();
            }
        }
        let e_n = tracking_error(&roll.states[np], &self.refs[np]);
        let q_e = mat_vec(&self.terminal_weight, &e_n);
        for i in 0..STATE_DIM {
            gx[np][i] = 2.0 * scale * q_e[i];
        }

        if terms.phi != 0.0 {
            let c = p.collision.as_ref().expect("potential implies collision settings");
            for (jn, f) in self.filters.iter().enumerate() {
                let Some(f) = f else { continue };
                let d = self.distances(&roll.states, jn);
                let denom = f.weighted_sum(&d).expect("lengths checked");
                let coef = -terms.j * f.lambda_sum() * c.r_min / (denom * denom);
                for k in 0..=np {
                    if d[k] > 0.0 {
                        let w = coef * f.weights()[k] / d[k];
                        gx[k][0] += w * (roll.states[k][0] - self.positions[jn][k][0]);
                        gx[k][1] += w * (roll.states[k][1] - self.positions[jn][k][1]);
                    }
                }
            }
        }

        if rho != 0.0 {
            for k in 1..=np {
                let x = &roll.states[k];
                if x[5].abs() > p.constraints.omega_max {
                    gx[k][5] += rho * x[5].signum();
                }
                if let Some(bx) = p.constraints.position_box {
                    if x[0] < bx[0] {
                        gx[k][0] -= rho;
                    } else if x[0] > bx[1] {
                        gx[k][0] += rho;
                    }
                    if x[1] < bx[2] {
                        gx[k][1] -= rho;
                    } else if x[1] > bx[3] {
                        gx[k][1] += rho;
                    }
                }
            }
            if p.terminal_constraint && quad(&self.terminal_weight, &e_n) > p.aux.level {
                for i in 0..STATE_DIM {
                    gx[np][i] += 2.0 * rho * q_e[i];
                }
            }
        }

        let mut grad = vec![0.0; INPUT_DIM * nc];
        let mut lam = gx[np];
        for k in (0..np).rev() {
            let a = &roll.a[k];
            let b = &roll.b[k];
            let mut mu = gu[k];
            for (i, m) in mu.iter_mut().enumerate() {
                *m += (0..STATE_DIM).map(|r| b[r][i] * lam[r]).sum::<f64>();
            }
            let mut next: State = std::array::from_fn(|j| gx[k][j] + (0..STATE_DIM).map(|r| a[r][j] * lam[r]).sum::<f64>());
            if k >= nc {
                let kt = &roll.tail[k - nc];
                for (j, v) in next.iter_mut().enumerate() {
                    *v += (0..INPUT_DIM).map(|i| kt[i][j] * mu[i]).sum::<f64>();
                }
            } else {
                grad[INPUT_DIM * k..INPUT_DIM * (k + 1)].copy_from_slice(&mu);
            }
            lam = next;
        }
        grad
    }

    fn unflatten(z: &[f64]) -> Vec<Input> {
        z.chunks_exact(INPUT_DIM).map(|c| std::array::from_fn(|i| c[i])).collect()
    }

    /// Penalized objective `J (1 + Phi) + rho P` at a control sequence.
    pub fn objective(&self, controls: &[Input], rho: f64) -> Result<f64, NmpcError> {
        let roll = self.rollout(controls, false);
        Ok(self.terms(&roll.states, &roll.inputs)?.value(rho))
    }

    /// Gradient of [`Self::objective`] with respect to the flattened
    /// controls `[u_0R, u_0L, u_1R, ...]`.
    pub fn gradient_at(&self, controls: &[Input], rho: f64) -> Result<Vec<f64>, NmpcError> {
        let roll = self.rollout(controls, true);
        let t = self.terms(&roll.states, &roll.inputs)?;
        Ok(self.gradient(&roll, &t, rho))
    }

    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let c = &self.prob.constraints;
        let nc = self.prob.control_horizon;
        let lo = (0..nc).flat_map(|_| c.u_min).collect();
        let hi = (0..nc).flat_map(|_| c.u_max).collect();
        (lo, hi)
    }

    /// Projected BFGS on the input box with Armijo backtracking.
    fn minimize(&self, mut z: Vec<f64>, rho: f64) -> Result<(Vec<f64>, usize), NmpcError> {
        let s = &self.prob.solver;
        let n = z.len();
        let (lo, hi) = self.bounds();
        let project = |v: &mut [f64]| {
            for i in 0..n {
                v[i] = v[i].clamp(lo[i], hi[i]);
            }
        };
        project(&mut z);
        let eval = |z: &[f64]| -> Result<(Terms, Rollout), NmpcError> {
            let roll = self.rollout(&Self::unflatten(z), true);
            Ok((self.terms(&roll.states, &roll.inputs)?, roll))
        };
        let (terms, roll) = eval(&z)?;
        let mut f = terms.value(rho);
        let mut g = self.gradient(&roll, &terms, rho);
        let mut h = vec![vec![0.0; n]; n];
        let reset = |h: &mut Vec<Vec<f64>>, scale: f64| {
            for (i, row) in h.iter_mut().enumerate() {
                row.iter_mut().for_each(|v| *v = 0.0);
                row[i] = scale;
            }
        };
        let g_inf = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        reset(&mut h, if g_inf > 0.0 { 1.0 / g_inf } else { 1.0 });
        let mut fresh = true;
        let mut iterations = 0;
        while iterations < s.max_iterations {
            let pg = (0..n).fold(0.0f64, |m, i| m.max(((z[i] - g[i]).clamp(lo[i], hi[i]) - z[i]).abs()));
            if pg <= s.tolerance {
                break;
            }
            iterations += 1;
            let free: Vec<bool> = (0..n)
                .map(|i| !((z[i] <= lo[i] && g[i] > 0.0) || (z[i] >= hi[i] && g[i] < 0.0)))
                .collect();
            let mut d: Vec<f64> = (0..n)
                .map(|i| {
                    if !free[i] {
                        0.0
                    } else {
                        -(0..n).filter(|&j| free[j]).map(|j| h[i][j] * g[j]).sum::<f64>()
                    }
                })
                .collect();
            if (0..n).map(|i| d[i] * g[i]).sum::<f64>() >= 0.0 {
                let g_inf = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                reset(&mut h, 1.0 / g_inf.max(f64::MIN_POSITIVE));
                fresh = true;
                d = (0..n).map(|i| if free[i] { -h[i][i] * g[i] } else { 0.0 }).collect();
            }

            let mut alpha = 1.0;
            let mut accepted = None;
            for _ in 0..40 {
                let mut trial: Vec<f64> = (0..n).map(|i| z[i] + alpha * d[i]).collect();
                project(&mut trial);
                let step: f64 = (0..n).map(|i| g[i] * (trial[i] - z[i])).sum();
                if trial == z {
                    break;
                }
                if let Ok((t, r)) = eval(&trial) {
                    let ft = t.value(rho);
                    if ft.is_finite() && ft <= f + 1e-4 * step {
                        accepted = Some((trial, t, r, ft));
                        break;
                    }
                }
                alpha *= 0.5;
            }
            let Some((zn, tn, rn, f_new)) = accepted else {
                if fresh {
                    break;
                }
                let g_inf = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                reset(&mut h, 1.0 / g_inf.max(f64::MIN_POSITIVE));
                fresh = true;
                continue;
            };
            let gn = self.gradient(&rn, &tn, rho);
            let sv: Vec<f64> = (0..n).map(|i| zn[i] - z[i]).collect();
            let yv: Vec<f64> = (0..n).map(|i| gn[i] - g[i]).collect();
            let sy: f64 = (0..n).map(|i| sv[i] * yv[i]).sum();
            let yy: f64 = yv.iter().map(|v| v * v).sum();
            let ss: f64 = sv.iter().map(|v| v * v).sum();
            if sy > 1e-10 * (ss * yy).sqrt() {
                if fresh {
                    reset(&mut h, sy / yy);
                    fresh = false;
                }
                // H <- (I - r s y') H (I - r y s') + r s s'
                let r = 1.0 / sy;
                let hy: Vec<f64> = (0..n).map(|i| (0..n).map(|j| h[i][j] * yv[j]).sum()).collect();
                let yhy: f64 = (0..n).map(|i| yv[i] * hy[i]).sum();
                for i in 0..n {
                    for j in 0..n {
                        h[i][j] += -r * (sv[i] * hy[j] + hy[i] * sv[j]) + (r * r * yhy + r) * sv[i] * sv[j];
                    }
                }
            }
            z = zn;
            f = f_new;
            g = gn;
        }
        Ok((z, iterations))
    }

    fn assemble(&self, controls: Vec<Input>, iterations: usize) -> Result<PlannedSolution, NmpcError> {
        let p = self.prob;
        let roll = self.rollout(&controls, false);
        let t = self.terms(&roll.states, &roll.inputs)?;
        let tol = 1e-9;
        let mut feasible = roll.states[1..].iter().all(|x| {
            x[5].abs() <= p.constraints.omega_max + tol
                && p.constraints.position_box.is_none_or(|b| x[0] >= b[0] - tol && x[0] <= b[1] + tol && x[1] >= b[2] - tol && x[1] <= b[3] + tol)
        });
        feasible &= roll
            .inputs
            .iter()
            .all(|u| (0..INPUT_DIM).all(|i| u[i] >= p.constraints.u_min[i] && u[i] <= p.constraints.u_max[i]));
        if p.terminal_constraint {
            let np = p.horizon;
            let h_f = quad(&self.terminal_weight, &tracking_error(&roll.states[np], &self.refs[np]));
            feasible &= h_f <= p.aux.level * (1.0 + p.solver.terminal_slack);
        }
        Ok(PlannedSolution {
            controls,
            inputs: roll.inputs,
            states: roll.states,
            references: self.refs.clone(),
            cost: CostBreakdown {
                j: t.j,
                phi: t.phi,
                j_mod: collision::modified_cost(t.j, t.phi),
            },
            penalty: t.penalty,
            feasible,
            iterations,
            fallback: false,
            active_neighbors: self.active_neighbors(),
        })
    }
}

/// Cost of a given trajectory: tracking, input and neighbor terms plus the
/// terminal weight, the repelling potential of the trajectory itself and
/// the modified cost.
pub fn evaluate_cost(states: &[State], inputs: &[Input], est: &Estimates, prob: &NmpcProblem) -> Result<CostBreakdown, NmpcError> {
    if states.len() != prob.horizon + 1 || inputs.len() != prob.horizon {
        return Err(NmpcError::Dimension("trajectory must have N_p + 1 states and N_p inputs"));
    }
    let mut tr = Transcription::unfrozen(&states[0], est, prob)?;
    tr.freeze(states)?;
    let t = tr.terms(states, inputs)?;
    Ok(CostBreakdown {
        j: t.j,
        phi: t.phi,
        j_mod: collision::modified_cost(t.j, t.phi),
    })
}

/// Auxiliary law applied from `x0` over the first `N_c` steps.
pub fn auxiliary_guess(x0: &State, est: &Estimates, prob: &NmpcProblem) -> Result<Vec<Input>, NmpcError> {
    let tr = Transcription::unfrozen(x0, est, prob)?;
    let mut x = *x0;
    let mut out = Vec::with_capacity(prob.control_horizon);
    for k in 0..prob.control_horizon {
        let u = prob.aux.control(&x, &tr.refs[k], &prob.params, &prob.constraints);
        out.push(u);
        x = dynamics::rk4_step(&x, &u, &prob.params);
    }
    Ok(out)
}

/// Solves the receding-horizon problem from `x0`. A warm start, when
/// given, seeds the optimizer and is returned instead when the optimized
/// sequence is infeasible or does not improve on it.
pub fn solve_rhocp(x0: &State, est: &Estimates, prob: &NmpcProblem, warm: Option<&[Input]>) -> Result<PlannedSolution, NmpcError> {
    let guess: Vec<Input> = match warm {
        Some(w) => {
            if w.len() != prob.control_horizon {
                return Err(NmpcError::Dimension("warm start length must be N_c"));
            }
            w.iter().map(|u| prob.constraints.clamp_input(*u)).collect()
        }
        None => auxiliary_guess(x0, est, prob)?,
    };
    let tr = Transcription::new(x0, est, prob, &guess)?;
    let mut z: Vec<f64> = guess.iter().flatten().copied().collect();
    let mut rho = prob.solver.penalty_initial;
    let mut iterations = 0;
    for _ in 0..prob.solver.penalty_rounds.max(1) {
        let (zn, it) = tr.minimize(z, rho)?;
        z = zn;
        iterations += it;
        let roll = tr.rollout(&Transcription::unflatten(&z), false);
        if tr.terms(&roll.states, &roll.inputs)?.penalty == 0.0 {
            break;
        }
        rho *= prob.solver.penalty_growth;
    }
    let candidate = tr.assemble(Transcription::unflatten(&z), iterations)?;
    let Some(_) = warm else {
        return if candidate.feasible {
            Ok(candidate)
        } else {
            Err(NmpcError::Infeasible {
                best: Box::new(candidate),
            })
        };
    };
    let mut fallback = tr.assemble(guess, iterations)?;
    fallback.fallback = true;
    match (candidate.feasible, fallback.feasible) {
        (true, false) => Ok(candidate),
        (true, true) if candidate.cost.j_mod <= fallback.cost.j_mod => Ok(candidate),
        (_, true) => Ok(fallback),
        (false, false) => {
            let best = if candidate.penalty <= fallback.penalty { candidate } else { fallback };
            Err(NmpcError::Infeasible { best: Box::new(best) })
        }
    }
}

/// Drops the first control and appends the auxiliary control at the
/// predicted state `x_{N_c}`.
pub fn shift_warm_start(prev: &PlannedSolution, prob: &NmpcProblem) -> Vec<Input> {
    let nc = prob.control_horizon;
    let mut out: Vec<Input> = prev.controls[1..].to_vec();
    if nc < prev.inputs.len() {
        out.push(prev.inputs[nc]);
    } else {
        out.push(prob.aux.control(&prev.states[nc], &prev.references[nc], &prob.params, &prob.constraints));
    }
    out
}
