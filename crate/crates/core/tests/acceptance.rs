//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

#![allow(clippy::needless_range_loop)]

use std::collections::BTreeSet;
use std::f64::consts::FRAC_PI_2;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use fleet_nmpc::codec::{self, CompressionReport, InputMode, TrainSettings, TrajectoryPacket, OVERHEAD_SLOTS};
use fleet_nmpc::comms::{ChannelModel, Network};
use fleet_nmpc::dynamics::{self, VehicleState};
use fleet_nmpc::graph::{self, Connectivity, ConnectivityMatrix};
use fleet_nmpc::nmpc::{self, diag6, Estimates, Input, NeighborEstimate, NmpcError, NmpcProblem, State, Transcription};
use fleet_nmpc::scenario::{self, RunOutput, Scenario, ScenarioConfig, StepRow};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MIN_DISTANCE: f64 = 4.75;
const RUN_BUDGET: Duration = Duration::from_secs(600);
const SGC_RATE: f64 = 0.99;
const GRID_RATIO: f64 = 1.05;
const GRID_BUDGET: Duration = Duration::from_secs(60);
const CERT_MARGIN: f64 = -1e-8;
const CONSTANT_XI: f64 = 1e-3;
const CAPACITY_BAND: f64 = 1.1;
const DELAY_MEAN: (f64, f64) = (0.33, 0.37);
const SYNC_RATIO: f64 = 0.05;
const GRADIENT_REL: f64 = 1e-4;
const RESIDUAL_RATE: f64 = 0.95;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn main() -> ExitCode {
    let started = Instant::now();
    let nominal = ScenarioConfig::nominal();
    let run = scenario::run(&nominal);
    let wall = started.elapsed();

    let results: Vec<(&str, Outcome)> = vec![
        ("1 collision avoidance", collision_avoidance(&run, wall)),
        ("2 compression bookkeeping", compression(&run)),
        ("3 small-gain monitoring", small_gain(&run)),
        ("4 optimizer grid oracle", grid_oracle()),
        ("5 terminal certificate", terminal_certificate()),
        ("6 codec properties", codec_properties()),
        ("7 connectivity oracle", connectivity_oracle()),
        ("8 synchronization", synchronization(&run)),
        ("9 gradient and invariance", gradient_and_invariance()),
        ("10 ISpS residual audit", residual_audit(&run)),
    ];
    let mut failed = 0;
    for (name, o) in &results {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {name:<28} {tag}  {}", o.detail);
        failed += usize::from(!o.pass);
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

type Run = Result<RunOutput, scenario::ScenarioError>;

fn with_run(run: &Run, f: impl FnOnce(&RunOutput) -> Outcome) -> Outcome {
    match run {
        Ok(out) => f(out),
        Err(e) => outcome(false, format!("nominal run failed: {e}")),
    }
}

fn collision_avoidance(run: &Run, wall: Duration) -> Outcome {
    with_run(run, |out| {
        let m = &out.metrics;
        let d = m.min_pairwise_distance.unwrap_or(f64::NAN);
        let pass = d >= MIN_DISTANCE && wall <= RUN_BUDGET && m.final_time >= 60.0 - 1e-9;
        outcome(
            pass,
            format!(
                "min distance {d:.3} m (>= {MIN_DISTANCE}) pair {:?} at t = {:.1} s, {:.0} s simulated in {:.0} s wall (<= {} s)",
                m.min_distance_pair,
                m.min_distance_time.unwrap_or(f64::NAN),
                m.final_time,
                wall.as_secs_f64(),
                RUN_BUDGET.as_secs()
            ),
        )
    })
}

fn compression(run: &Run) -> Outcome {
    let q = codec::parameter_count(6, 6, InputMode::PerState);
    let bare = CompressionReport::new(6, 50, q, 0);
    let framed = CompressionReport::new(6, 50, q, OVERHEAD_SLOTS);
    let mut pass = q == 84 && bare.factor == 0.72 && framed.factor == 0.70 && framed.factor_params_only == 0.72;
    let mut detail = format!("q = {q}, params-only {}, with {OVERHEAD_SLOTS}-slot overhead {}", bare.factor, framed.factor);
    match run.as_ref().ok().and_then(|o| o.metrics.compression.clone()) {
        Some(c) => {
            pass &= c.params == 84 && c.samples == 50 && c.factor == 0.70;
            detail += &format!("; nominal packets {} params over {} samples, factor {}", c.params, c.samples, c.factor);
        }
        None => {
            pass = false;
            detail += "; nominal run reported no packets";
        }
    }
    outcome(pass, detail)
}

fn small_gain(run: &Run) -> Outcome {
    with_run(run, |out| {
        let m = &out.metrics;
        let rate = m.sgc_rate_after_transient.unwrap_or(0.0);
        outcome(
            rate >= SGC_RATE,
            format!(
                "{:.2}% of {} steps after {} s (>= {:.0}%), {} agent-step violations",
                100.0 * rate,
                m.sgc_steps_after_transient,
                m.transient,
                100.0 * SGC_RATE,
                m.sgc_agent_violations
            ),
        )
    })
}

fn short_horizon_problem(scn: &Scenario) -> NmpcProblem {
    let mut p = scn.problem(1).clone();
    p.horizon = 3;
    p.control_horizon = 3;
    p.collision = None;
    p.terminal_constraint = false;
    p
}

fn rollout(x0: &State, inputs: &[Input], p: &NmpcProblem) -> Vec<State> {
    let mut out = vec![*x0];
    for u in inputs {
        out.push(dynamics::rk4_step(out.last().unwrap(), u, &p.params));
    }
    out
}

fn grid_oracle() -> Outcome {
    let started = Instant::now();
    let scn = match Scenario::prepare(ScenarioConfig::nominal()) {
        Ok(s) => s,
        Err(e) => return outcome(false, format!("setup failed: {e}")),
    };
    let p = short_horizon_problem(&scn);
    let goal: Vec<State> = (0..=3).map(|k| [0.0, 0.5 * k as f64, 0.0, 5.0, FRAC_PI_2, 0.0]).collect();
    let est = Estimates { goal: &goal, neighbors: &[] };
    let (lo, hi) = (p.constraints.u_min, p.constraints.u_max);
    let level = |c: usize, i: usize| lo[c] + (hi[c] - lo[c]) * i as f64 / 4.0;
    let pairs: Vec<Input> = (0..5).flat_map(|a| (0..5).map(move |b| [level(0, a), level(1, b)])).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    let mut errors = 0;
    for _ in 0..20 {
        let x0: State = [
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(3.0..7.0),
            FRAC_PI_2 + rng.random_range(-0.4..0.4),
            rng.random_range(-0.5..0.5),
        ];
        let mut best = f64::INFINITY;
        for a in &pairs {
            for b in &pairs {
                for c in &pairs {
                    let inputs = [*a, *b, *c];
                    let states = rollout(&x0, &inputs, &p);
                    if !states.iter().all(|s| p.constraints.state_ok(&VehicleState::from_array(*s))) {
                        continue;
                    }
                    if let Ok(cost) = nmpc::evaluate_cost(&states, &inputs, &est, &p) {
                        best = best.min(cost.j_mod);
                    }
                }
            }
        }
        let solved = match nmpc::solve_rhocp(&x0, &est, &p, None) {
            Ok(s) => s,
            Err(NmpcError::Infeasible { best }) => *best,
            Err(_) => {
                errors += 1;
                continue;
            }
        };
        worst = worst.max(solved.cost.j_mod / best);
    }
    let elapsed = started.elapsed();
    outcome(
        errors == 0 && worst <= GRID_RATIO && elapsed <= GRID_BUDGET,
        format!(
            "worst solver/grid cost ratio {worst:.4} (<= {GRID_RATIO}) over 20 states, {:.1} s (<= {} s)",
            elapsed.as_secs_f64(),
            GRID_BUDGET.as_secs()
        ),
    )
}

fn terminal_certificate() -> Outcome {
    match scenario::synthesize_terminal(&ScenarioConfig::nominal()) {
        Ok((_, s)) => {
            let a = &s.audit;
            outcome(
                s.margin <= CERT_MARGIN && a.passed && a.samples == 100,
                format!(
                    "margin {:.3e} (<= {CERT_MARGIN:e}), level {:.4}, audit {} samples x {} steps: {} set, {} constraint, {} decrease violations",
                    s.margin, s.level, a.samples, a.steps, a.set_violations, a.constraint_violations, a.decrease_violations
                ),
            )
        }
        Err(e) => outcome(false, format!("synthesis failed: {e}")),
    }
}

fn wiggly(l: usize) -> Vec<Vec<f64>> {
    (0..l)
        .map(|k| {
            let t = k as f64 * 0.1;
            vec![
                8.0 * (1.3 * t).sin() + 5.0 * t,
                6.0 * (1.7 * t).cos() + 0.5 * t * t,
                10.4 * (1.3 * t).cos() + 5.0,
                -10.2 * (1.7 * t).sin() + t,
                (0.9 * t).sin() * (0.4 * t).cos(),
                0.9 * (0.9 * t).cos(),
            ]
        })
        .collect()
}

fn codec_properties() -> Outcome {
    let settings = TrainSettings::default();
    let mut pass = true;
    let mut notes = Vec::new();

    let constant = vec![vec![3.0, -1.0, 0.5, 0.0, 1.2, 0.0]; 50];
    let xi = codec::train(&constant, 0.1, 6, InputMode::PerState, &settings, 7).map(|m| m.xi_hat_max());
    match xi {
        Ok(x) => {
            pass &= x <= CONSTANT_XI;
            notes.push(format!("constant xi {x:.1e}"));
        }
        Err(e) => {
            pass = false;
            notes.push(format!("constant fit failed: {e}"));
        }
    }

    let traj = wiggly(50);
    let errs: Result<Vec<f64>, _> = [2, 4, 6, 8]
        .iter()
        .map(|&h| codec::train(&traj, 0.1, h, InputMode::PerState, &settings, 42).map(|m| m.xi_hat_max()))
        .collect();
    match errs {
        Ok(e) => {
            pass &= e.windows(2).all(|w| w[1] <= CAPACITY_BAND * w[0]);
            notes.push(format!("capacity H=2,4,6,8 -> {}", e.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join("/")));
        }
        Err(err) => {
            pass = false;
            notes.push(format!("capacity fit failed: {err}"));
        }
    }

    let round_trip = codec::train(&traj, 0.1, 6, InputMode::PerState, &settings, 3)
        .map_err(|e| e.to_string())
        .and_then(|m| {
            let (p, _) = m.encode(4, 12.3, OVERHEAD_SLOTS);
            let bytes = p.to_bytes();
            let back = TrajectoryPacket::from_bytes(&bytes).map_err(|e| e.to_string())?;
            let model = codec::NnModel::from_packet(&back).map_err(|e| e.to_string())?;
            let same_bits = model.params.iter().zip(&m.params).all(|(a, b)| a.to_bits() == b.to_bits());
            Ok(back == p && back.to_bytes() == bytes && same_bits && model.params.len() == m.params.len())
        });
    let rt = matches!(round_trip, Ok(true));
    pass &= rt;
    notes.push(format!("round trip bit-exact {rt}"));

    let mean = match Network::<()>::new(ChannelModel::for_sample_time(0.1, 99), 2) {
        Ok(mut net) => {
            let mut sum = 0.0;
            let mut ok = true;
            for _ in 0..1000 {
                match net.send_to(&(), 0, 1, 0, 0.0, 1, 0.0) {
                    Ok(p) => sum += p.delivery_time - p.send_time,
                    Err(_) => ok = false,
                }
            }
            ok.then_some(sum / 1000.0)
        }
        Err(_) => None,
    };
    match mean {
        Some(m) => {
            pass &= (DELAY_MEAN.0..=DELAY_MEAN.1).contains(&m);
            notes.push(format!("delay mean {m:.4} s in [{}, {}]", DELAY_MEAN.0, DELAY_MEAN.1));
        }
        None => {
            pass = false;
            notes.push("channel failed".into());
        }
    }
    outcome(pass, notes.join(", "))
}

fn all_graphs(n: usize) -> impl Iterator<Item = ConnectivityMatrix> {
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|(i, j)| i != j).collect();
    (0u32..1 << pairs.len()).map(move |mask| {
        let links: Vec<(usize, usize)> = pairs.iter().enumerate().filter(|(b, _)| mask >> b & 1 == 1).map(|(_, &l)| l).collect();
        ConnectivityMatrix::from_links(n, &links).unwrap()
    })
}

/// Brute-force reachability by repeated expansion; `reach[i][j]` when
/// `j` is reachable from `i` along edges `i <- j` (in-neighbour links).
fn reach(g: &ConnectivityMatrix, undirected: bool) -> Vec<Vec<bool>> {
    let n = g.len();
    (0..n)
        .map(|s| {
            let mut seen = vec![false; n];
            seen[s] = true;
            let mut frontier = vec![s];
            while let Some(i) = frontier.pop() {
                for j in 0..n {
                    let linked = g.has_edge(i, j) || (undirected && g.has_edge(j, i));
                    if linked && !seen[j] {
                        seen[j] = true;
                        frontier.push(j);
                    }
                }
            }
            seen
        })
        .collect()
}

fn connectivity_oracle() -> Outcome {
    let mut graphs = 0;
    let mut mismatches = 0;
    for n in 1..=4 {
        for g in all_graphs(n) {
            graphs += 1;
            let directed = reach(&g, false);
            let undirected = reach(&g, true);
            let expected = if directed.iter().flatten().all(|&b| b) {
                Connectivity::StronglyConnected
            } else if undirected.iter().flatten().all(|&b| b) {
                Connectivity::WeaklyConnected
            } else {
                Connectivity::Disconnected
            };
            let mut ok = graph::classify_connectivity(&g) == expected;

            let order = graph::block_triangular_order(&g);
            let mut sorted = order.perm.clone();
            sorted.sort_unstable();
            ok &= sorted == (0..n).collect::<Vec<_>>() && order.blocks.iter().sum::<usize>() == n;
            let mut block_of = vec![0; n];
            let mut start = 0;
            for (b, &len) in order.blocks.iter().enumerate() {
                let members: BTreeSet<usize> = order.perm[start..start + len].iter().copied().collect();
                for &m in &members {
                    block_of[m] = b;
                }
                // a block is exactly one mutual-reachability class
                for &a in &members {
                    let class: BTreeSet<usize> = (0..n).filter(|&c| directed[a][c] && directed[c][a]).collect();
                    ok &= class == members;
                }
                start += len;
            }
            // upper block-triangular: no edge from a later block into an earlier one
            for i in 0..n {
                for j in 0..n {
                    if g.has_edge(i, j) && block_of[i] > block_of[j] {
                        ok = false;
                    }
                }
            }
            mismatches += usize::from(!ok);
        }
    }
    outcome(mismatches == 0, format!("{graphs} digraphs on 1..=4 nodes, {mismatches} mismatches"))
}

fn synchronization(run: &Run) -> Outcome {
    with_run(run, |out| {
        let m = &out.metrics;
        let ratios: Vec<f64> = (1..m.agents)
            .map(|i| m.final_formation_error[i] / m.initial_formation_error[i])
            .collect();
        let worst = ratios.iter().copied().fold(0.0, f64::max);
        outcome(
            !ratios.is_empty() && ratios.iter().all(|&r| r <= SYNC_RATIO),
            format!(
                "final/initial formation error {} (<= {SYNC_RATIO}), worst {worst:.4}",
                ratios.iter().map(|r| format!("{r:.4}")).collect::<Vec<_>>().join(" ")
            ),
        )
    })
}

fn gradient_check() -> Result<f64, String> {
    let scn = Scenario::prepare(ScenarioConfig::nominal()).map_err(|e| e.to_string())?;
    let p = scn.problem(1).clone();
    let np = p.horizon;
    let goal: Vec<State> = (0..=np).map(|k| [0.0, 0.5 * k as f64, 0.0, 5.0, FRAC_PI_2, 0.0]).collect();
    let weight = diag6([0.025, 0.025, 0.25, 0.025, 0.25, 0.025]);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let x0: State = [
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(3.0..7.0),
            FRAC_PI_2 + rng.random_range(-0.4..0.4),
            rng.random_range(-0.5..0.5),
        ];
        let controls: Vec<Input> = (0..p.control_horizon)
            .map(|_| [rng.random_range(-5.5..5.5), rng.random_range(-5.5..5.5)])
            .collect();
        let mut padded = controls.clone();
        padded.resize(np, [0.0; 2]);
        let base = rollout(&x0, &padded, &p);
        // neighbours near the rollout so the repelling term is often active
        let neighbors: Vec<NeighborEstimate> = (0..2)
            .map(|id| {
                let dx = rng.random_range(-6.0..6.0);
                let dy = rng.random_range(-6.0..6.0);
                NeighborEstimate {
                    id: id + 2,
                    weight,
                    offset: [dx, dy, 0.0, 0.0, 0.0, 0.0],
                    states: base.iter().map(|s| [s[0] + dx, s[1] + dy, s[2], s[3], s[4], s[5]]).collect(),
                }
            })
            .collect();
        let est = Estimates { goal: &goal, neighbors: &neighbors };
        let tr = Transcription::new(&x0, &est, &p, &controls).map_err(|e| e.to_string())?;
        let rho = 10.0;
        let g = tr.gradient_at(&controls, rho).map_err(|e| e.to_string())?;
        let h = 1e-6;
        let mut diff = 0.0;
        let mut norm = 0.0;
        for (i, gi) in g.iter().enumerate() {
            let mut plus = controls.clone();
            let mut minus = controls.clone();
            plus[i / 2][i % 2] += h;
            minus[i / 2][i % 2] -= h;
            let fd = (tr.objective(&plus, rho).map_err(|e| e.to_string())? - tr.objective(&minus, rho).map_err(|e| e.to_string())?) / (2.0 * h);
            diff += (gi - fd).powi(2);
            norm += fd * fd;
        }
        worst = worst.max(diff.sqrt() / norm.sqrt().max(1e-12));
    }
    Ok(worst)
}

fn short_config(seconds: f64) -> ScenarioConfig {
    let mut cfg = ScenarioConfig::nominal();
    cfg.duration = seconds;
    cfg
}

/// Nominal scenario with every vehicle already cruising on its slot, so the
/// collision potential never engages.
fn steady_config(seconds: f64) -> ScenarioConfig {
    let mut cfg = short_config(seconds);
    let speed = cfg.leader.speed;
    for agent in &mut cfg.agents {
        agent.initial = [agent.slot[0], agent.slot[1], 0.0, speed, std::f64::consts::FRAC_PI_2, 0.0];
    }
    cfg
}

fn controls_of(rows: &[StepRow]) -> Vec<[u64; 10]> {
    rows.iter()
        .map(|r| [r.x, r.y, r.vx, r.vy, r.theta, r.omega, r.u_r, r.u_l, r.j, r.phi].map(f64::to_bits))
        .collect()
}

fn gradient_and_invariance() -> Outcome {
    let mut pass = true;
    let mut notes = Vec::new();
    match gradient_check() {
        Ok(w) => {
            pass &= w <= GRADIENT_REL;
            notes.push(format!("worst gradient error {w:.2e} over 50 points (<= {GRADIENT_REL:e})"));
        }
        Err(e) => {
            pass = false;
            notes.push(format!("gradient check failed: {e}"));
        }
    }

    let on = steady_config(3.0);
    let mut off = on.clone();
    off.collision.enabled = false;
    match (scenario::run(&on), scenario::run(&off)) {
        (Ok(a), Ok(b)) => {
            let inactive = a.rows.iter().all(|r| r.active_neighbors == 0 && r.phi == 0.0);
            let same = a.rows == b.rows;
            pass &= inactive && same;
            notes.push(format!("potential on/off: inactive {inactive}, rows bit-identical {same}"));
        }
        _ => {
            pass = false;
            notes.push("potential on/off runs failed".into());
        }
    }

    let watched = short_config(3.0);
    let mut blind = watched.clone();
    blind.monitor.enabled = false;
    match (scenario::run(&watched), scenario::run(&blind)) {
        (Ok(a), Ok(b)) => {
            let same = controls_of(&a.rows) == controls_of(&b.rows);
            pass &= same;
            notes.push(format!("monitor passivity {same}"));
        }
        _ => {
            pass = false;
            notes.push("monitor on/off runs failed".into());
        }
    }
    outcome(pass, notes.join(", "))
}

fn residual_audit(run: &Run) -> Outcome {
    with_run(run, |out| {
        let m = &out.metrics;
        let rate = m.residual_rate_final_window.unwrap_or(0.0);
        outcome(
            rate >= RESIDUAL_RATE,
            format!(
                "{:.2}% of {} steps in final {} s (>= {:.0}%), worst residual {:.3e}",
                100.0 * rate,
                m.residual_steps_final_window,
                m.residual_window,
                100.0 * RESIDUAL_RATE,
                m.residual_worst_final_window.unwrap_or(f64::NAN)
            ),
        )
    })
}
