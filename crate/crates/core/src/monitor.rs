//! Online stability instrumentation: Lyapunov values, small-gain curves,
//! the network small-gain condition and ISpS decrease residuals.
//!
//! All comparison functions use the quadratic instantiation:
//! `alpha_1(s) = lambda_Q_min s^2`, `sigma_2(s) = lambda_S_max |w~_max| (N_p - 1) s`,
//! `sigma_1(s) = sigma_2(s) + (M - 1) lambda_S_max s^2` and `c = sigma_2(xi_hat)`.

use serde::{Deserialize, Serialize};

use crate::graph::{block_triangular_order, ConnectivityMatrix};
use crate::nmpc::PlannedSolution;
use crate::scalar::Real;

/// Bounds used by the collision variant of the gain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollisionBounds<T> {
    pub phi_upper: T,
    pub phi_lower: T,
    pub kappa_lower: T,
    pub kappa_upper: T,
}

impl<T: Real> Default for CollisionBounds<T> {
    fn default() -> Self {
        Self {
            phi_upper: T::zero(),
            phi_lower: T::zero(),
            kappa_lower: T::one(),
            kappa_upper: T::one(),
        }
    }
}

/// Gain data of the edge `j -> i`: weights of agent `i`, `lambda_q_min`
/// of agent `j`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GainParams<T> {
    pub k_bar: T,
    pub lambda_s_max: T,
    pub lambda_q_min: T,
    pub lambda_qf_max: T,
    pub w_tilde_max: T,
    /// Neighborhood size including the agent itself.
    pub neighborhood: usize,
    pub horizon: usize,
    pub collision: CollisionBounds<T>,
}

impl<T: Real> GainParams<T> {
    fn prefactor(&self) -> T {
        T::one() / (self.k_bar + T::one())
    }

    fn linear_coeff(&self) -> T {
        T::lit(self.horizon.saturating_sub(1) as f64) * self.lambda_s_max * self.w_tilde_max
    }

    fn quadratic_coeff(&self) -> T {
        T::lit(self.neighborhood.saturating_sub(1) as f64) * self.lambda_s_max
    }
}

/// `gamma_ij(r)`. Without collision:
/// `(N_p-1) l_S |w| sqrt(r / l_Q) / (k+1) + (M-1) l_S r / (l_Q (k+1))`.
/// The collision variant scales by `(1 + Phi_up) / kappa_lo` and replaces
/// `l_Q` by `(1 + Phi_lo) l_Q`, with an extra `1 / kappa_lo` on the
/// quadratic term.
pub fn gain_curve<T: Real>(r: T, g: &GainParams<T>, collision: bool) -> T {
    let r = r.max(T::zero());
    let lin = g.linear_coeff();
    let quad = g.quadratic_coeff();
    if !collision {
        return g.prefactor() * (lin * (r / g.lambda_q_min).sqrt() + quad * r / g.lambda_q_min);
    }
    let c = g.collision;
    let lq = (T::one() + c.phi_lower) * g.lambda_q_min;
    let pre = (T::one() + c.phi_upper) * g.prefactor() / c.kappa_lower;
    pre * (lin / lq.sqrt() * r.sqrt() + quad / (c.kappa_lower * lq) * r)
}

/// `V = J'*`, the modified optimal cost.
pub fn lyapunov_value(sol: &PlannedSolution) -> f64 {
    sol.cost.j_mod
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgcReport {
    pub verdicts: Vec<bool>,
    /// `max_j gamma_ij(V_j)` per agent, 0 without in-neighbors.
    pub max_gain: Vec<f64>,
    /// Verdicts of the block-iterative procedure over the upper
    /// block-triangular ordering.
    pub block_verdicts: Vec<bool>,
}

impl SgcReport {
    pub fn all_hold(&self) -> bool {
        self.verdicts.iter().all(|&v| v)
    }

    pub fn agrees(&self) -> bool {
        self.verdicts == self.block_verdicts
    }
}

/// `V_i > gamma_ij(V_j)` must be strict for positive values; an agent at
/// `V_i = 0` facing zero gains sits at equilibrium and passes.
fn holds(v: f64, max_gain: f64) -> bool {
    v > max_gain || (v == 0.0 && max_gain == 0.0)
}

/// Checks `V_i > max_{j in G^i} gamma_ij(V_j)`. `gains(i, j)` supplies the
/// parameters of edge `j -> i`; `collision[i]` selects the variant.
pub fn check_sgc<F>(v: &[f64], gamma: &ConnectivityMatrix, gains: F, collision: &[bool]) -> SgcReport
where
    F: Fn(usize, usize) -> GainParams<f64>,
{
    let n = v.len();
    assert_eq!(gamma.len(), n, "connectivity size");
    assert_eq!(collision.len(), n, "collision flags");
    let gain = |i: usize, j: usize| gain_curve(v[j], &gains(i, j), collision[i]);
    let max_gain: Vec<f64> = (0..n)
        .map(|i| gamma.in_neighbors(i).into_iter().filter(|&j| j != i).map(|j| gain(i, j)).fold(0.0, f64::max))
        .collect();
    let verdicts = (0..n).map(|i| holds(v[i], max_gain[i])).collect();

    // Grow the leading principal block one diagonal block at a time; each
    // agent's condition is re-evaluated against the neighbors inside the
    // current block. The last block is the whole matrix.
    let order = block_triangular_order(gamma);
    let mut pos = vec![0; n];
    for (k, &i) in order.perm.iter().enumerate() {
        pos[i] = k;
    }
    let mut block_verdicts = vec![true; n];
    let mut end = 0;
    for size in &order.blocks {
        end += size;
        for &i in &order.perm[..end] {
            let m = gamma
                .in_neighbors(i)
                .into_iter()
                .filter(|&j| j != i && pos[j] < end)
                .map(|j| gain(i, j))
                .fold(0.0, f64::max);
            block_verdicts[i] = holds(v[i], m);
        }
    }
    SgcReport {
        verdicts,
        max_gain,
        block_verdicts,
    }
}

/// Inputs of one decrease check. Norms are in error coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecreaseSample {
    pub v_t: f64,
    pub v_next: f64,
    pub x_norm: f64,
    pub w_norm: f64,
    pub w_next_norm: f64,
    pub xi_hat: f64,
}

/// Budget `-alpha(|x_t|) + sigma_1(|w_t|) + sigma_2(|w_t+1|) + c`.
pub fn decrease_budget(s: &DecreaseSample, g: &GainParams<f64>) -> f64 {
    let sigma2 = |r: f64| g.linear_coeff() * r;
    let sigma1 = |r: f64| sigma2(r) + g.quadratic_coeff() * r * r;
    -g.lambda_q_min * s.x_norm * s.x_norm + sigma1(s.w_norm) + sigma2(s.w_next_norm) + sigma2(s.xi_hat)
}

/// `(V_t+1 - V_t) - budget`; non-positive when the step is consistent with
/// the ISpS certificate.
pub fn isps_residual(s: &DecreaseSample, g: &GainParams<f64>) -> f64 {
    (s.v_next - s.v_t) - decrease_budget(s, g)
}

/// Per-agent quantities the monitor needs at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentObservation {
    pub v: f64,
    pub phi: f64,
    pub x_norm: f64,
    /// Largest neighbor interaction error.
    pub w_norm: f64,
    pub xi_hat: f64,
    pub on_collision_course: bool,
}

/// Static per-agent weight data.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentWeights {
    pub lambda_q_min: f64,
    pub lambda_qf_max: f64,
    /// Largest eigenvalue over the agent's neighbor weights `S^{ij}`.
    pub lambda_s_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonitorSettings {
    pub enabled: bool,
    pub k_bar: f64,
    /// Fixed collision bounds; when absent, `Phi_up` tracks the largest
    /// observed potential and the rest default to `(0, 1, 1)`.
    pub collision_bounds: Option<CollisionBounds<f64>>,
}

impl Default for MonitorSettings {
    fn default() -> Self {
        Self {
            enabled: true,
            k_bar: 5e3,
            collision_bounds: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityRecord {
    pub v: Vec<f64>,
    pub max_gain: Vec<f64>,
    pub sgc_ok: Vec<bool>,
    pub block_agrees: bool,
    /// `None` on the first observed step.
    pub residual: Vec<Option<f64>>,
    pub w_tilde_max: Vec<f64>,
}

/// Stateful consumer of per-step observations.
#[derive(Debug, Clone)]
pub struct Monitor {
    settings: MonitorSettings,
    gamma: ConnectivityMatrix,
    weights: Vec<AgentWeights>,
    horizon: usize,
    w_tilde_max: Vec<f64>,
    phi_max: f64,
    previous: Option<Vec<AgentObservation>>,
}

impl Monitor {
    pub fn new(settings: MonitorSettings, gamma: ConnectivityMatrix, weights: Vec<AgentWeights>, horizon: usize) -> Self {
        let n = weights.len();
        assert_eq!(gamma.len(), n, "connectivity size");
        Self {
            settings,
            gamma,
            weights,
            horizon,
            w_tilde_max: vec![0.0; n],
            phi_max: 0.0,
            previous: None,
        }
    }

    fn bounds(&self) -> CollisionBounds<f64> {
        self.settings.collision_bounds.unwrap_or(CollisionBounds {
            phi_upper: self.phi_max,
            ..CollisionBounds::default()
        })
    }

    /// Parameters of edge `j -> i`.
    pub fn gain_params(&self, i: usize, j: usize) -> GainParams<f64> {
        let m = self.gamma.in_neighbors(i).into_iter().filter(|&k| k != i).count() + 1;
        GainParams {
            k_bar: self.settings.k_bar,
            lambda_s_max: self.weights[i].lambda_s_max,
            lambda_q_min: self.weights[j].lambda_q_min,
            lambda_qf_max: self.weights[i].lambda_qf_max,
            w_tilde_max: self.w_tilde_max[i],
            neighborhood: m,
            horizon: self.horizon,
            collision: self.bounds(),
        }
    }

    fn own_params(&self, i: usize) -> GainParams<f64> {
        GainParams {
            lambda_q_min: self.weights[i].lambda_q_min,
            ..self.gain_params(i, i)
        }
    }

    pub fn observe(&mut self, obs: &[AgentObservation]) -> StabilityRecord {
        let n = self.weights.len();
        assert_eq!(obs.len(), n, "one observation per agent");
        for (w, o) in self.w_tilde_max.iter_mut().zip(obs) {
            *w = w.max(o.w_norm);
            self.phi_max = self.phi_max.max(o.phi);
        }
        let v: Vec<f64> = obs.iter().map(|o| o.v).collect();
        let flags: Vec<bool> = obs.iter().map(|o| o.on_collision_course).collect();
        let report = check_sgc(&v, &self.gamma, |i, j| self.gain_params(i, j), &flags);
        let residual = (0..n)
            .map(|i| {
                self.previous.as_ref().map(|prev| {
                    let s = DecreaseSample {
                        v_t: prev[i].v,
                        v_next: obs[i].v,
                        x_norm: prev[i].x_norm,
                        w_norm: prev[i].w_norm,
                        w_next_norm: obs[i].w_norm,
                        xi_hat: obs[i].xi_hat,
                    };
                    isps_residual(&s, &self.own_params(i))
                })
            })
            .collect();
        self.previous = Some(obs.to_vec());
        StabilityRecord {
            v,
            max_gain: report.max_gain.clone(),
            sgc_ok: report.verdicts.clone(),
            block_agrees: report.agrees(),
            residual,
            w_tilde_max: self.w_tilde_max.clone(),
        }
    }
}

/// Extreme eigenvalues of a symmetric 6x6 matrix.
pub fn eigen_range(m: &crate::dynamics::Mat6<f64>) -> (f64, f64) {
    let mat = nalgebra::Matrix6::from_fn(|i, j| 0.5 * (m[i][j] + m[j][i]));
    let ev = mat.symmetric_eigenvalues();
    (ev.min(), ev.max())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fleet_params() -> GainParams<f64> {
        // Q = 0.1 diag(1,1,10,1,10,1), S = 0.25 Q.
        GainParams {
            k_bar: 5e3,
            lambda_s_max: 0.25,
            lambda_q_min: 0.1,
            lambda_qf_max: 1.0,
            w_tilde_max: 3.0,
            neighborhood: 3,
            horizon: 50,
            collision: CollisionBounds::default(),
        }
    }

    fn with_collision(phi_up: f64, phi_lo: f64, kappa: f64) -> GainParams<f64> {
        GainParams {
            collision: CollisionBounds {
                phi_upper: phi_up,
                phi_lower: phi_lo,
                kappa_lower: kappa,
                kappa_upper: 1.0,
            },
            ..fleet_params()
        }
    }

    #[test]
    fn zero_at_zero() {
        assert_eq!(gain_curve(0.0, &fleet_params(), false), 0.0);
        assert_eq!(gain_curve(0.0, &with_collision(2.0, 0.5, 0.7), true), 0.0);
    }

    #[test]
    fn doubling_prefactor_halves_gain() {
        let g = fleet_params();
        let g2 = GainParams { k_bar: 2.0 * (g.k_bar + 1.0) - 1.0, ..g };
        for r in [0.1, 1.0, 7.5, 300.0] {
            for c in [false, true] {
                let a = gain_curve(r, &g, c);
                let b = gain_curve(r, &g2, c);
                assert!((a - 2.0 * b).abs() <= 1e-15 * a, "{a} {b}");
            }
        }
    }

    #[test]
    fn fleet_values_match_independent_evaluation() {
        let g = fleet_params();
        for r in [1e-4f64, 0.5, 6.25, 40.0, 1234.5] {
            // Expanded form with the coefficients multiplied out by hand.
            let lin = 49.0 * 0.25 * 3.0 / 5001.0 / 0.1f64.sqrt();
            let quad = 2.0 * 0.25 / 0.1 / 5001.0;
            let want = lin * r.sqrt() + quad * r;
            let got = gain_curve(r, &g, false);
            assert!((got - want).abs() <= 1e-14 * want, "{got} {want}");
            // Single precision path agrees to its own precision.
            let gf = GainParams::<f32> {
                k_bar: 5e3,
                lambda_s_max: 0.25,
                lambda_q_min: 0.1,
                lambda_qf_max: 1.0,
                w_tilde_max: 3.0,
                neighborhood: 3,
                horizon: 50,
                collision: CollisionBounds::default(),
            };
            let f = gain_curve(r as f32, &gf, false) as f64;
            assert!((f - want).abs() <= 1e-5 * want);
        }
    }

    #[test]
    fn collision_variant_reduces_to_plain_at_defaults() {
        let g = fleet_params();
        for r in [0.3, 3.0, 30.0] {
            assert!((gain_curve(r, &g, true) - gain_curve(r, &g, false)).abs() < 1e-15);
        }
        let c = with_collision(1.0, 0.0, 1.0);
        assert!((gain_curve(5.0, &c, true) - 2.0 * gain_curve(5.0, &c, false)).abs() < 1e-14);
    }

    #[test]
    fn single_agent_is_vacuous() {
        let gamma = ConnectivityMatrix::zeros(1);
        for v in [0.0, 3.0] {
            let rep = check_sgc(&[v], &gamma, |_, _| fleet_params(), &[false]);
            assert!(rep.all_hold() && rep.agrees());
        }
    }

    #[test]
    fn zero_coupling_passes_for_positive_values() {
        let gamma = ConnectivityMatrix::from_links(3, &[(0, 1), (1, 2), (2, 0)]).unwrap();
        let g = GainParams {
            lambda_s_max: 0.0,
            ..fleet_params()
        };
        let rep = check_sgc(&[1.0, 0.2, 5.0], &gamma, |_, _| g, &[false; 3]);
        assert!(rep.all_hold());
        assert_eq!(rep.max_gain, vec![0.0; 3]);
    }

    #[test]
    fn large_neighbor_value_breaks_condition() {
        let gamma = ConnectivityMatrix::from_links(2, &[(1, 0)]).unwrap();
        let rep = check_sgc(&[1e-6, 1e6], &gamma, |_, _| fleet_params(), &[false; 2]);
        assert_eq!(rep.verdicts, vec![false, true]);
        assert!(rep.agrees());
    }

    #[test]
    fn residual_flags_spike_and_budget_scales_with_xi() {
        let g = fleet_params();
        let calm = DecreaseSample {
            v_t: 10.0,
            v_next: 9.9,
            x_norm: 0.5,
            w_norm: 0.0,
            w_next_norm: 0.0,
            xi_hat: 0.0,
        };
        assert!(isps_residual(&calm, &g) <= 0.0);
        let spike = DecreaseSample { v_next: 1e3, ..calm };
        assert!(isps_residual(&spike, &g) > 0.0);
        let base = DecreaseSample { x_norm: 0.0, ..calm };
        let c1 = decrease_budget(&DecreaseSample { xi_hat: 0.01, ..base }, &g);
        let c2 = decrease_budget(&DecreaseSample { xi_hat: 0.02, ..base }, &g);
        assert!((c2 - 2.0 * c1).abs() < 1e-15);
    }

    #[test]
    fn monitor_tracks_running_maxima() {
        let gamma = ConnectivityMatrix::from_links(2, &[(0, 1), (1, 0)]).unwrap();
        let w = AgentWeights {
            lambda_q_min: 0.1,
            lambda_qf_max: 1.0,
            lambda_s_max: 0.25,
        };
        let mut m = Monitor::new(MonitorSettings::default(), gamma, vec![w.clone(), w], 50);
        let obs = |w_norm: f64, v: f64| AgentObservation {
            v,
            phi: 0.0,
            x_norm: 0.1,
            w_norm,
            xi_hat: 1e-3,
            on_collision_course: false,
        };
        let r0 = m.observe(&[obs(2.0, 5.0), obs(1.0, 5.0)]);
        assert!(r0.residual.iter().all(Option::is_none));
        let r1 = m.observe(&[obs(0.5, 4.9), obs(3.0, 4.9)]);
        assert_eq!(r1.w_tilde_max, vec![2.0, 3.0]);
        assert!(r1.residual.iter().all(|r| r.unwrap() <= 0.0));
        assert!(r1.sgc_ok.iter().all(|&b| b));
    }

    #[test]
    fn eigen_range_of_weights() {
        let q = crate::nmpc::diag6([0.1, 0.1, 1.0, 0.1, 1.0, 0.1]);
        let (lo, hi) = eigen_range(&q);
        assert!((lo - 0.1).abs() < 1e-14 && (hi - 1.0).abs() < 1e-14);
    }

    fn arb_graph(n: usize) -> impl Strategy<Value = ConnectivityMatrix> {
        prop::collection::vec(any::<bool>(), n * n).prop_map(move |bits| {
            let links: Vec<(usize, usize)> = (0..n * n).filter(|&k| bits[k] && k / n != k % n).map(|k| (k / n, k % n)).collect();
            ConnectivityMatrix::from_links(n, &links).unwrap()
        })
    }

    proptest! {
        #[test]
        fn gain_is_class_k(w in 0.0f64..50.0, m in 1usize..6, k in 0.1f64..1e4, phi_up in 0.0f64..10.0, phi_lo in 0.0f64..2.0, kappa in 0.1f64..2.0) {
            let g = GainParams { w_tilde_max: w, neighborhood: m, k_bar: k, ..with_collision(phi_up, phi_lo, kappa) };
            for c in [false, true] {
                prop_assert_eq!(gain_curve(0.0, &g, c), 0.0);
                let mut prev = 0.0;
                for s in 1..200 {
                    let r = 1e-3 * (s as f64).powi(2);
                    let v = gain_curve(r, &g, c);
                    if w > 0.0 || m > 1 {
                        prop_assert!(v > prev);
                    } else {
                        prop_assert_eq!(v, 0.0);
                    }
                    prev = v;
                }
            }
        }

        #[test]
        fn block_procedure_matches_direct(n in 1usize..7, seed_graph in arb_graph(6), v in prop::collection::vec(0.0f64..10.0, 6), w in 0.0f64..100.0, flags in prop::collection::vec(any::<bool>(), 6)) {
            let rows: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| seed_graph.get(i, j)).collect()).collect();
            let gamma = ConnectivityMatrix::from_rows(&rows).unwrap();
            let g = GainParams { w_tilde_max: w, ..with_collision(1.0, 0.2, 0.8) };
            let rep = check_sgc(&v[..n], &gamma, |_, _| g, &flags[..n]);
            prop_assert!(rep.agrees());
        }
    }
}
