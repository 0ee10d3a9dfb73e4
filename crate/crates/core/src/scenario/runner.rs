//! Lock-step closed loop: deliver packets, rebuild estimates, solve,
//! compress and transmit plans, apply the first input, monitor.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::config::{ConfigError, ScenarioConfig};
use super::log::{compute_metrics, Metrics, StepRow};
use crate::codec::{self, CodecError, RawTrajectory, TrajectoryPacket, OVERHEAD_SLOTS};
use crate::collision::{self, FilterDesign};
use crate::comms::{ChannelError, ChannelModel, EdgeStats, Network};
use crate::dynamics::{self, Mat6, STATE_DIM};
use crate::graph::ConnectivityMatrix;
use crate::monitor::{self, AgentObservation, AgentWeights, Monitor};
use crate::nmpc::{
    self, diag2, diag6, tracking_error, wrap_angle, AuxiliaryLaw, CollisionSettings, Estimates, NeighborEstimate,
    NmpcError, NmpcProblem, PlannedSolution, State,
};
use crate::terminal::{self, CruiseErrorDynamics, SynthesisOptions, TerminalDesign, TerminalWeights};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("terminal synthesis failed: {0}")]
    Synthesis(String),
    #[error("runtime failure: {0}")]
    Runtime(String),
    #[error("i/o failure: {0}")]
    Io(String),
}

impl ScenarioError {
    pub fn exit_code(&self) -> i32 {
        match self {
            ScenarioError::Config(_) => 1,
            ScenarioError::Synthesis(_) => 2,
            ScenarioError::Runtime(_) | ScenarioError::Io(_) => 3,
        }
    }
}

impl From<ChannelError> for ScenarioError {
    fn from(e: ChannelError) -> Self {
        ScenarioError::Runtime(e.to_string())
    }
}

impl From<CodecError> for ScenarioError {
    fn from(e: CodecError) -> Self {
        ScenarioError::Runtime(format!("codec: {e}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditSummary {
    pub samples: usize,
    pub steps: usize,
    pub set_violations: usize,
    pub constraint_violations: usize,
    pub decrease_violations: usize,
    pub worst_decrease: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminalSummary {
    pub cruise_speed: f64,
    /// Neighborhood size used in the stage weight `Q + (M - 1) S`.
    pub neighborhood: usize,
    pub gain: Vec<Vec<f64>>,
    pub terminal_weight: Vec<Vec<f64>>,
    pub level: f64,
    pub margin: f64,
    pub audit: AuditSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSummary {
    pub a_bar: f64,
    pub ratio: f64,
    pub degenerate: bool,
    pub within_bound: bool,
    pub spread: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeRecord {
    pub from: usize,
    pub to: usize,
    #[serde(flatten)]
    pub stats: EdgeStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub rows: Vec<StepRow>,
    pub metrics: Metrics,
    pub terminal: TerminalSummary,
    pub filter: Option<FilterSummary>,
    pub edges: Vec<EdgeRecord>,
}

#[derive(Debug, Clone, PartialEq)]
enum Piece {
    Line { start: [f64; 2], dir: [f64; 2], len: f64 },
    /// Arc entered at `start` travelling along `dir`; `turn` is +1 for a
    /// left turn and -1 for a right turn.
    Arc { start: [f64; 2], dir: [f64; 2], radius: f64, sweep: f64, turn: f64 },
}

impl Piece {
    fn len(&self) -> f64 {
        match self {
            Piece::Line { len, .. } => *len,
            Piece::Arc { radius, sweep, .. } => radius * sweep,
        }
    }

    /// Position, unit tangent and heading rate at arc length `s`.
    fn at(&self, s: f64, speed: f64) -> ([f64; 2], [f64; 2], f64) {
        match *self {
            Piece::Line { start, dir, .. } => ([start[0] + s * dir[0], start[1] + s * dir[1]], dir, 0.0),
            Piece::Arc { start, dir, radius, turn, .. } => {
                let a = s / radius;
                let (sa, ca) = a.sin_cos();
                let normal = [-turn * dir[1], turn * dir[0]];
                let pos = [
                    start[0] + radius * (sa * dir[0] + (1.0 - ca) * normal[0]),
                    start[1] + radius * (sa * dir[1] + (1.0 - ca) * normal[1]),
                ];
                let tangent = [ca * dir[0] + sa * normal[0], ca * dir[1] + sa * normal[1]];
                (pos, tangent, turn * speed / radius)
            }
        }
    }
}

/// Leader reference moving at constant speed along the waypoint polyline,
/// with every corner replaced by a circular arc, and holding at the last
/// waypoint.
#[derive(Debug, Clone, PartialEq)]
pub struct VirtualReference {
    pieces: Vec<Piece>,
    end: [f64; 2],
    speed: f64,
}

impl VirtualReference {
    /// Corner arcs use `turn_radius`, shrunk where a leg is shorter than
    /// twice the arc's tangent length.
    pub fn new(waypoints: &[[f64; 2]], speed: f64, turn_radius: f64) -> Self {
        let mut pts: Vec<[f64; 2]> = Vec::with_capacity(waypoints.len());
        for w in waypoints {
            if pts.last() != Some(w) {
                pts.push(*w);
            }
        }
        let end = *pts.last().unwrap_or(&[0.0, 0.0]);
        let legs: Vec<([f64; 2], f64)> = pts
            .windows(2)
            .map(|w| {
                let (dx, dy) = (w[1][0] - w[0][0], w[1][1] - w[0][1]);
                let len = dx.hypot(dy);
                ([dx / len, dy / len], len)
            })
            .collect();
        // tangent length cut from each end of every leg, and the arc at each interior vertex
        let mut cut = vec![0.0; pts.len()];
        let mut arcs = vec![None; pts.len()];
        for v in 1..pts.len().saturating_sub(1) {
            let (din, lin) = legs[v - 1];
            let (dout, lout) = legs[v];
            let angle = (din[0] * dout[1] - din[1] * dout[0]).atan2(din[0] * dout[0] + din[1] * dout[1]);
            if angle.abs() < 1e-9 || turn_radius <= 0.0 {
                continue;
            }
            let half = (0.5 * angle.abs()).tan();
            let tangent = (turn_radius * half).min(0.5 * lin).min(0.5 * lout);
            cut[v] = tangent;
            arcs[v] = Some((tangent / half, angle.abs(), angle.signum()));
        }
        let mut pieces = Vec::new();
        for (l, &(dir, len)) in legs.iter().enumerate() {
            let start = [pts[l][0] + cut[l] * dir[0], pts[l][1] + cut[l] * dir[1]];
            let straight = len - cut[l] - cut[l + 1];
            if straight > 0.0 {
                pieces.push(Piece::Line { start, dir, len: straight });
            }
            if let Some((radius, sweep, turn)) = arcs[l + 1] {
                let v = pts[l + 1];
                let c = cut[l + 1];
                pieces.push(Piece::Arc {
                    start: [v[0] - c * dir[0], v[1] - c * dir[1]],
                    dir,
                    radius,
                    sweep,
                    turn,
                });
            }
        }
        Self { pieces, end, speed }
    }

    pub fn state_at(&self, t: f64) -> State {
        let mut s = (self.speed * t).max(0.0);
        let mut heading = None;
        for p in &self.pieces {
            let len = p.len();
            if s <= len {
                let (pos, tan, omega) = p.at(s, self.speed);
                let th = unwind(tan[1].atan2(tan[0]), heading);
                return [pos[0], pos[1], self.speed * tan[0], self.speed * tan[1], th, omega];
            }
            let (_, tan, _) = p.at(len, self.speed);
            heading = Some(unwind(tan[1].atan2(tan[0]), heading));
            s -= len;
        }
        [self.end[0], self.end[1], 0.0, 0.0, heading.unwrap_or(0.0), 0.0]
    }

    pub fn window(&self, t: f64, dt: f64, horizon: usize) -> Vec<State> {
        (0..=horizon).map(|k| self.state_at(t + k as f64 * dt)).collect()
    }
}

/// `angle` shifted by a multiple of 2 pi to lie within pi of `previous`.
fn unwind(angle: f64, previous: Option<f64>) -> f64 {
    previous.map_or(angle, |p| p + nmpc::wrap_angle(angle - p))
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn max_neighborhood(gamma: &ConnectivityMatrix) -> usize {
    (0..gamma.len()).map(|i| gamma.in_neighbors(i).len() + 1).max().unwrap_or(1)
}

/// Terminal ingredients for the cruise linearization of the configured
/// vehicle, plus the closed-loop audit.
pub fn synthesize_terminal(cfg: &ScenarioConfig) -> Result<(TerminalDesign, TerminalSummary), ScenarioError> {
    let gamma = connectivity(cfg)?;
    let plant = CruiseErrorDynamics {
        params: cfg.vehicle.params(cfg.sample_time),
        speed: cfg.terminal.cruise_speed,
    };
    let q = DMatrix::from_diagonal(&DVector::from_row_slice(&cfg.weights.q_diag));
    let w = TerminalWeights {
        s: &q * cfg.weights.neighbor_scale,
        q,
        r: DMatrix::from_diagonal(&DVector::from_row_slice(&cfg.weights.r_diag)),
        n_agents: max_neighborhood(&gamma),
    };
    let opts = SynthesisOptions {
        strictness: cfg.terminal.strictness,
        level_iterations: cfg.terminal.level_iterations,
        decrease_samples: cfg.terminal.decrease_samples,
        seed: cfg.seed ^ 0x7e57,
        ..SynthesisOptions::default()
    };
    let model = plant.linearize();
    let cons = plant.constraints(&cfg.vehicle.constraints());
    let design = terminal::synthesize(&model, &w, &cons, Some(&plant), &opts).map_err(|e| ScenarioError::Synthesis(e.to_string()))?;
    if !(design.level > 0.0) {
        return Err(ScenarioError::Synthesis("empty terminal set".into()));
    }
    let a = terminal::audit(&design, &plant, &w, &cons, cfg.terminal.audit_samples, cfg.terminal.audit_steps, cfg.seed ^ 0xa0d1);
    let summary = TerminalSummary {
        cruise_speed: cfg.terminal.cruise_speed,
        neighborhood: w.n_agents,
        gain: to_rows(&design.k),
        terminal_weight: to_rows(&design.q_f),
        level: design.level,
        margin: design.margin,
        audit: AuditSummary {
            samples: a.samples,
            steps: a.steps,
            set_violations: a.set_violations,
            constraint_violations: a.constraint_violations,
            decrease_violations: a.decrease_violations,
            worst_decrease: a.worst_decrease,
            passed: a.passed(),
        },
    };
    Ok((design, summary))
}

fn connectivity(cfg: &ScenarioConfig) -> Result<ConnectivityMatrix, ScenarioError> {
    let links: Vec<(usize, usize)> = cfg.links.iter().map(|l| (l[0], l[1])).collect();
    ConnectivityMatrix::from_links(cfg.agents.len(), &links).map_err(|e| ScenarioError::Config(ConfigError::Invalid(e.to_string())))
}

fn scaled(m: &Mat6<f64>, s: f64) -> Mat6<f64> {
    m.map(|row| row.map(|v| v * s))
}

fn norm(v: &State) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Formation error of agent `i`: distance to the slot implied by the
/// leader's current position.
pub fn formation_error(cfg: &ScenarioConfig, i: usize, p: [f64; 2], leader: [f64; 2]) -> f64 {
    let s0 = cfg.agents[0].slot;
    let si = cfg.agents[i].slot;
    (p[0] - leader[0] + s0[0] - si[0]).hypot(p[1] - leader[1] + s0[1] - si[1])
}

/// What travels on the network.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    /// Serialized network packet; the training error rides along for the
    /// monitor and is not part of the wire format.
    Packet { bytes: Vec<u8>, xi_hat: f64 },
    Raw(RawTrajectory),
}

#[derive(Debug, Clone, PartialEq)]
enum Plan {
    /// State known at `time`, extrapolated at constant velocity and turn
    /// rate.
    Coast { state: State, time: f64 },
    Packet(TrajectoryPacket),
    Raw(RawTrajectory),
}

#[derive(Debug, Clone, PartialEq)]
struct Known {
    plan: Plan,
    timestamp: f64,
    xi_hat: f64,
}

impl Payload {
    fn open(&self) -> Result<Known, ScenarioError> {
        Ok(match self {
            Payload::Packet { bytes, xi_hat } => {
                let p = TrajectoryPacket::from_bytes(bytes)?;
                Known {
                    timestamp: p.timestamp,
                    plan: Plan::Packet(p),
                    xi_hat: *xi_hat,
                }
            }
            Payload::Raw(r) => Known {
                timestamp: r.timestamp,
                plan: Plan::Raw(r.clone()),
                xi_hat: 0.0,
            },
        })
    }
}

#[derive(Debug, Clone)]
struct AgentSim {
    x: State,
    prev: Option<PlannedSolution>,
    known: BTreeMap<usize, Known>,
}

struct StepResult {
    sol: PlannedSolution,
    infeasible: bool,
    payload: Payload,
    packet_params: usize,
    x_norm: f64,
    w_norm: f64,
    xi_hat: f64,
}

#[derive(Debug, Clone, Copy, Default)]
struct Io {
    packets_in: usize,
    packets_out: usize,
    dropped_in: usize,
    stale_in: usize,
    late_in: usize,
    delay_sum_in: f64,
    delay_max_in: f64,
}

/// Prepared scenario: validated configuration, terminal design and
/// per-agent problems.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub gamma: ConnectivityMatrix,
    pub terminal: TerminalSummary,
    pub filter: Option<FilterSummary>,
    problems: Vec<NmpcProblem>,
    /// In-neighbors of each agent with `S^{ij}` and `a^{ij}`.
    links: Vec<Vec<(usize, Mat6<f64>, State)>>,
    weights: Vec<AgentWeights>,
    reference: VirtualReference,
}

impl Scenario {
    pub fn prepare(config: ScenarioConfig) -> Result<Self, ScenarioError> {
        config.validate()?;
        let cfg = &config;
        let gamma = connectivity(cfg)?;
        let (design, terminal) = synthesize_terminal(cfg)?;
        let aux = AuxiliaryLaw::from_design(&design).map_err(|e| ScenarioError::Synthesis(e.to_string()))?;
        let q = diag6(cfg.weights.q_diag);
        let (q_min, q_max) = monitor::eigen_range(&q);
        let (_, qf_max) = monitor::eigen_range(&aux.terminal_weight);
        let np = cfg.horizon.prediction;

        let (rank_weights, filter) = if cfg.collision.enabled {
            let c = &cfg.collision;
            let a_bar = c.a_bar.unwrap_or_else(|| {
                let l = q_max * c.state_bound;
                collision::ratio_bound(c.r_floor, np, c.r_min, c.v_max, l, l, qf_max * c.state_bound)
            });
            let d: FilterDesign<f64> = collision::design_filter_gp(a_bar, c.b_bar, c.lambda_max, np + 1)
                .map_err(|e| ScenarioError::Config(ConfigError::Invalid(e.to_string())))?;
            let summary = FilterSummary {
                a_bar,
                ratio: d.ratio,
                degenerate: d.degenerate,
                within_bound: d.within_bound,
                spread: d.spread(),
            };
            (Some(d.rank_weights), Some(summary))
        } else {
            (None, None)
        };

        let s = scaled(&q, cfg.weights.neighbor_scale);
        let slot = |i: usize| cfg.agents[i].slot;
        let offset = |from: usize, to: usize| -> State { [slot(to)[0] - slot(from)[0], slot(to)[1] - slot(from)[1], 0.0, 0.0, 0.0, 0.0] };
        let n = cfg.agents.len();
        let mut links = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        let mut problems = Vec::with_capacity(n);
        for i in 0..n {
            let s_i = if i == 0 { scaled(&s, cfg.weights.leader_neighbor_scale) } else { s };
            let nb: Vec<(usize, Mat6<f64>, State)> = gamma.in_neighbors(i).into_iter().map(|j| (j, s_i, offset(i, j))).collect();
            weights.push(AgentWeights {
                lambda_q_min: q_min,
                lambda_qf_max: qf_max,
                lambda_s_max: if nb.is_empty() { 0.0 } else { monitor::eigen_range(&s_i).1 },
            });
            links.push(nb);
            problems.push(NmpcProblem {
                horizon: np,
                control_horizon: cfg.horizon.control,
                params: cfg.vehicle.params(cfg.sample_time),
                constraints: cfg.vehicle.constraints(),
                q,
                r: diag2(cfg.weights.r_diag),
                aux: aux.clone(),
                goal_offset: if i == 0 { [0.0; STATE_DIM] } else { offset(i, 0) },
                collision: rank_weights.as_ref().map(|w| CollisionSettings {
                    r_min: cfg.collision.r_min,
                    rank_weights: w.clone(),
                }),
                terminal_constraint: cfg.terminal.constraint,
                solver: cfg.solver.clone(),
            });
        }
        for p in &problems {
            p.validate().map_err(|e| ScenarioError::Config(ConfigError::Invalid(e.to_string())))?;
        }
        Ok(Self {
            reference: VirtualReference::new(&cfg.leader.waypoints, cfg.leader.speed, cfg.leader.turn_radius),
            config,
            gamma,
            terminal,
            filter,
            problems,
            links,
            weights,
        })
    }

    pub fn problem(&self, i: usize) -> &NmpcProblem {
        &self.problems[i]
    }

    pub fn reference(&self) -> &VirtualReference {
        &self.reference
    }

    fn estimate(&self, known: &Known, t: f64) -> Result<Vec<State>, ScenarioError> {
        let cfg = &self.config;
        let n = cfg.horizon.prediction + 1;
        let delay = codec::estimate_delay(known.timestamp, t).0;
        let to_state = |v: Vec<f64>| -> State { std::array::from_fn(|i| v[i]) };
        Ok(match &known.plan {
            Plan::Coast { state, time } => (0..n)
                .map(|j| {
                    let tau = t + j as f64 * cfg.sample_time - time;
                    let mut x = *state;
                    x[0] += tau * state[2];
                    x[1] += tau * state[3];
                    x[4] += tau * state[5];
                    x
                })
                .collect(),
            Plan::Packet(p) => codec::reconstruct(p, cfg.sample_time, n, delay, cfg.codec.extrapolation)?
                .into_iter()
                .map(to_state)
                .collect(),
            Plan::Raw(r) => r.reconstruct(cfg.sample_time, n, delay, cfg.codec.extrapolation).into_iter().map(to_state).collect(),
        })
    }

    fn agent_step(&self, i: usize, k: usize, a: &AgentSim) -> Result<StepResult, ScenarioError> {
        let cfg = &self.config;
        let dt = cfg.sample_time;
        let t = k as f64 * dt;
        let np = cfg.horizon.prediction;
        let prob = &self.problems[i];
        let lookup = |j: usize| a.known.get(&j).ok_or_else(|| ScenarioError::Runtime(format!("agent {i} has no estimate of agent {j}")));

        let mut xi_hat: f64 = 0.0;
        let goal = if i == 0 {
            self.reference.window(t, dt, np)
        } else {
            let kn = lookup(0)?;
            xi_hat = kn.xi_hat;
            self.estimate(kn, t)?
        };
        let mut neighbors = Vec::with_capacity(self.links[i].len());
        for (j, s, off) in &self.links[i] {
            let kn = lookup(*j)?;
            xi_hat = xi_hat.max(kn.xi_hat);
            neighbors.push(NeighborEstimate {
                id: *j,
                weight: *s,
                offset: *off,
                states: self.estimate(kn, t)?,
            });
        }
        let est = Estimates {
            goal: &goal,
            neighbors: &neighbors,
        };
        let warm = a.prev.as_ref().map(|p| nmpc::shift_warm_start(p, prob));
        let (sol, infeasible) = match nmpc::solve_rhocp(&a.x, &est, prob, warm.as_deref()) {
            Ok(s) => (s, false),
            Err(NmpcError::Infeasible { best }) => (*best, true),
            Err(e) => return Err(ScenarioError::Runtime(format!("agent {i} at t = {t}: {e}"))),
        };

        let r0 = sol.references[0];
        let x_norm = norm(&tracking_error(&a.x, &r0));
        let w_norm = neighbors
            .iter()
            .map(|nb| {
                let mut target: State = std::array::from_fn(|m| nb.states[0][m] - nb.offset[m]);
                target[4] = wrap_angle(target[4]);
                norm(&tracking_error(&target, &r0))
            })
            .fold(0.0, f64::max);

        let samples: Vec<Vec<f64>> = sol.states[1..].iter().map(|s| s.to_vec()).collect();
        let timestamp = (k + 1) as f64 * dt;
        let (payload, packet_params) = if cfg.codec.passthrough {
            let raw = RawTrajectory {
                id: i as u16,
                timestamp,
                sample_time: dt,
                samples,
            };
            (Payload::Raw(raw), 0)
        } else {
            let seed = cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ ((i as u64) << 40) ^ k as u64;
            let model = codec::train(&samples, dt, cfg.codec.hidden, cfg.codec.mode, &cfg.codec.training, seed)?;
            let (packet, _) = model.encode(i as u16, timestamp, OVERHEAD_SLOTS);
            (
                Payload::Packet {
                    bytes: packet.to_bytes(),
                    xi_hat: model.xi_hat_max(),
                },
                packet.params.len(),
            )
        };
        Ok(StepResult {
            sol,
            infeasible,
            payload,
            packet_params,
            x_norm,
            w_norm,
            xi_hat,
        })
    }

    fn dropped_by_destination<P: Clone>(net: &Network<P>, n: usize) -> Vec<usize> {
        let mut out = vec![0; n];
        for (&(_, to), s) in net.edge_stats() {
            out[to] += s.dropped;
        }
        out
    }

    pub fn run(&self) -> Result<RunOutput, ScenarioError> {
        let cfg = &self.config;
        let n = cfg.agents.len();
        let dt = cfg.sample_time;
        let steps = cfg.steps();
        let late_bound = cfg.collision.r_min / cfg.collision.v_max;
        let mut net: Network<Payload> = Network::new(
            ChannelModel {
                delay_min: cfg.channel.delay_min,
                delay_max: cfg.channel.delay_max,
                drop_threshold: cfg.channel.drop_threshold,
                seed: cfg.seed,
            },
            n,
        )?;
        let initial: BTreeMap<usize, Known> = cfg
            .agents
            .iter()
            .enumerate()
            .map(|(j, a)| {
                (
                    j,
                    Known {
                        plan: Plan::Coast { state: a.initial, time: 0.0 },
                        timestamp: f64::NEG_INFINITY,
                        xi_hat: 0.0,
                    },
                )
            })
            .collect();
        let mut agents: Vec<AgentSim> = cfg
            .agents
            .iter()
            .map(|a| AgentSim {
                x: a.initial,
                prev: None,
                known: initial.clone(),
            })
            .collect();
        let mut mon = cfg.monitor.enabled.then(|| Monitor::new(cfg.monitor, self.gamma.clone(), self.weights.clone(), cfg.horizon.prediction));
        let mut rows = Vec::with_capacity(steps * n);

        for k in 0..steps {
            let t = k as f64 * dt;
            let mut io = vec![Io::default(); n];
            let before = Self::dropped_by_destination(&net, n);
            let deliveries = net.deliver(t);
            for (i, (a, b)) in Self::dropped_by_destination(&net, n).into_iter().zip(before).enumerate() {
                io[i].dropped_in = a - b;
            }
            for d in deliveries {
                let dst = d.destination;
                let c = &mut io[dst];
                c.packets_in += 1;
                c.delay_sum_in += d.link_delay;
                c.delay_max_in = c.delay_max_in.max(d.link_delay);
                if d.age > late_bound {
                    c.late_in += 1;
                }
                let known = d.packet.open()?;
                let fresh = agents[dst].known.get(&d.origin).is_none_or(|old| known.timestamp > old.timestamp);
                if !fresh {
                    c.stale_in += 1;
                    continue;
                }
                agents[dst].known.insert(d.origin, known);
                if d.origin == 0 && dst != 0 {
                    for j in self.gamma.out_neighbors(dst) {
                        if j != 0 && j != d.source && !self.gamma.has_edge(j, 0) {
                            net.send_to(&d.packet, dst, j, 0, d.origin_time, d.hops + 1, t)?;
                            io[dst].packets_out += 1;
                        }
                    }
                }
            }

            let results: Vec<StepResult> = agents
                .par_iter()
                .enumerate()
                .map(|(i, a)| self.agent_step(i, k, a))
                .collect::<Result<_, _>>()?;

            let record = mon.as_mut().map(|m| {
                let obs: Vec<AgentObservation> = results
                    .iter()
                    .map(|r| AgentObservation {
                        v: monitor::lyapunov_value(&r.sol),
                        phi: r.sol.cost.phi,
                        x_norm: r.x_norm,
                        w_norm: r.w_norm,
                        xi_hat: r.xi_hat,
                        on_collision_course: !r.sol.active_neighbors.is_empty(),
                    })
                    .collect();
                m.observe(&obs)
            });

            let leader = [agents[0].x[0], agents[0].x[1]];
            for (i, r) in results.into_iter().enumerate() {
                let x = agents[i].x;
                let u = r.sol.first_input();
                io[i].packets_out += net.send(&r.payload, i, &self.gamma, t)?.len();
                rows.push(StepRow {
                    step: k,
                    t,
                    agent: i,
                    x: x[0],
                    y: x[1],
                    vx: x[2],
                    vy: x[3],
                    theta: x[4],
                    omega: x[5],
                    u_r: u[0],
                    u_l: u[1],
                    j: r.sol.cost.j,
                    phi: r.sol.cost.phi,
                    j_mod: r.sol.cost.j_mod,
                    v: monitor::lyapunov_value(&r.sol),
                    iterations: r.sol.iterations,
                    feasible: !r.infeasible,
                    fallback: r.sol.fallback,
                    active_neighbors: r.sol.active_neighbors.len(),
                    x_norm: r.x_norm,
                    w_norm: r.w_norm,
                    xi_hat: r.xi_hat,
                    max_gain: record.as_ref().map(|rec| rec.max_gain[i]),
                    sgc_ok: record.as_ref().map(|rec| rec.sgc_ok[i]),
                    residual: record.as_ref().and_then(|rec| rec.residual[i]),
                    formation_error: formation_error(cfg, i, [x[0], x[1]], leader),
                    packets_in: io[i].packets_in,
                    packets_out: io[i].packets_out,
                    dropped_in: io[i].dropped_in,
                    stale_in: io[i].stale_in,
                    late_in: io[i].late_in,
                    delay_sum_in: io[i].delay_sum_in,
                    delay_max_in: io[i].delay_max_in,
                    packet_params: r.packet_params,
                    packet_samples: cfg.horizon.prediction,
                });
                let next = dynamics::rk4_step(&x, &u, &self.problems[i].params);
                if !next.iter().all(|v| v.is_finite()) {
                    return Err(ScenarioError::Runtime(format!("agent {i} state diverged at t = {t}")));
                }
                agents[i].x = next;
                agents[i].prev = Some(r.sol);
            }
            if let Some(rec) = &record {
                if !rec.block_agrees {
                    return Err(ScenarioError::Runtime(format!("block-iterative small-gain check disagrees at t = {t}")));
                }
            }
        }

        let metrics = compute_metrics(&rows, &cfg.metrics);
        let edges = net.edge_stats().iter().map(|(&(from, to), s)| EdgeRecord { from, to, stats: *s }).collect();
        Ok(RunOutput {
            rows,
            metrics,
            terminal: self.terminal.clone(),
            filter: self.filter.clone(),
            edges,
        })
    }
}

impl Scenario {
    /// Feeds the logged observations through a fresh monitor and counts
    /// rows whose logged gain, verdict or residual differ from the
    /// recomputation.
    pub fn replay_monitor(&self, rows: &[StepRow]) -> Result<usize, ScenarioError> {
        let cfg = &self.config;
        let n = cfg.agents.len();
        let mut mon = Monitor::new(cfg.monitor, self.gamma.clone(), self.weights.clone(), cfg.horizon.prediction);
        let mut mismatches = 0;
        for g in rows.chunk_by(|a, b| a.step == b.step) {
            if g.len() != n || g.iter().enumerate().any(|(i, r)| r.agent != i) {
                return Err(ScenarioError::Runtime(format!("log step {} does not list agents 0..{n} in order", g[0].step)));
            }
            let obs: Vec<AgentObservation> = g
                .iter()
                .map(|r| AgentObservation {
                    v: r.v,
                    phi: r.phi,
                    x_norm: r.x_norm,
                    w_norm: r.w_norm,
                    xi_hat: r.xi_hat,
                    on_collision_course: r.active_neighbors > 0,
                })
                .collect();
            let rec = mon.observe(&obs);
            for (i, r) in g.iter().enumerate() {
                if r.max_gain != Some(rec.max_gain[i]) || r.sgc_ok != Some(rec.sgc_ok[i]) || r.residual != rec.residual[i] {
                    mismatches += 1;
                }
            }
        }
        Ok(mismatches)
    }
}

/// Validates, synthesizes and runs.
pub fn run(cfg: &ScenarioConfig) -> Result<RunOutput, ScenarioError> {
    Scenario::prepare(cfg.clone())?.run()
}
