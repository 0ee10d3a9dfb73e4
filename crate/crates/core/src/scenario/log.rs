//! Run log rows, metrics recomputed from rows, and artifact files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::MetricsConfig;
use super::runner::{RunOutput, ScenarioError};
use crate::codec::{CompressionReport, OVERHEAD_SLOTS};
use crate::dynamics::STATE_DIM;

/// One row per (step, agent). Quantities describe the state at `t`, the
/// solve made from it and the packets handled during the step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub step: usize,
    pub t: f64,
    pub agent: usize,
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub theta: f64,
    pub omega: f64,
    pub u_r: f64,
    pub u_l: f64,
    pub j: f64,
    pub phi: f64,
    pub j_mod: f64,
    pub v: f64,
    pub iterations: usize,
    pub feasible: bool,
    pub fallback: bool,
    pub active_neighbors: usize,
    pub x_norm: f64,
    pub w_norm: f64,
    pub xi_hat: f64,
    pub max_gain: Option<f64>,
    pub sgc_ok: Option<bool>,
    pub residual: Option<f64>,
    pub formation_error: f64,
    pub packets_in: usize,
    pub packets_out: usize,
    pub dropped_in: usize,
    pub stale_in: usize,
    pub late_in: usize,
    pub delay_sum_in: f64,
    pub delay_max_in: f64,
    pub packet_params: usize,
    pub packet_samples: usize,
}

pub const RUN_HEADER: [&str; 35] = [
    "step",
    "t",
    "agent",
    "x",
    "y",
    "vx",
    "vy",
    "theta",
    "omega",
    "u_r",
    "u_l",
    "j",
    "phi",
    "j_mod",
    "v",
    "iterations",
    "feasible",
    "fallback",
    "active_neighbors",
    "x_norm",
    "w_norm",
    "xi_hat",
    "max_gain",
    "sgc_ok",
    "residual",
    "formation_error",
    "packets_in",
    "packets_out",
    "dropped_in",
    "stale_in",
    "late_in",
    "delay_sum_in",
    "delay_max_in",
    "packet_params",
    "packet_samples",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionSummary {
    pub params: usize,
    pub samples: usize,
    pub raw: usize,
    pub factor: f64,
    pub factor_params_only: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub steps: usize,
    pub agents: usize,
    pub final_time: f64,
    pub min_pairwise_distance: Option<f64>,
    pub min_distance_pair: Option<(usize, usize)>,
    pub min_distance_time: Option<f64>,
    pub initial_formation_error: Vec<f64>,
    pub final_formation_error: Vec<f64>,
    pub compression: Option<CompressionSummary>,
    pub xi_hat_max: f64,
    pub packets_sent: usize,
    pub packets_delivered: usize,
    pub packets_dropped: usize,
    pub packets_in_flight: usize,
    pub packets_stale: usize,
    /// Deliveries older than the collision-manoeuvre bound `R_min / v_max`.
    pub packets_late: usize,
    pub drop_rate: f64,
    pub mean_delay: f64,
    pub max_delay: f64,
    pub transient: f64,
    /// Steps after the transient where every agent satisfies the
    /// small-gain condition, over steps evaluated.
    pub sgc_rate_after_transient: Option<f64>,
    pub sgc_steps_after_transient: usize,
    pub sgc_agent_violations: usize,
    pub residual_window: f64,
    /// Steps in the final window where every agent's ISpS residual is
    /// non-positive.
    pub residual_rate_final_window: Option<f64>,
    pub residual_steps_final_window: usize,
    pub residual_worst_final_window: Option<f64>,
    pub mean_iterations: f64,
    pub infeasible_solves: usize,
    pub fallback_solves: usize,
}

fn step_groups(rows: &[StepRow]) -> Vec<&[StepRow]> {
    rows.chunk_by(|a, b| a.step == b.step).collect()
}

/// Metrics derived from the rows alone, so a re-read log reproduces them.
pub fn compute_metrics(rows: &[StepRow], mc: &MetricsConfig) -> Metrics {
    let groups = step_groups(rows);
    let agents = groups.first().map_or(0, |g| g.len());
    let final_time = rows.last().map_or(0.0, |r| r.t);

    let mut min_d: Option<(f64, (usize, usize), f64)> = None;
    for g in &groups {
        for a in 0..g.len() {
            for b in a + 1..g.len() {
                let d = (g[a].x - g[b].x).hypot(g[a].y - g[b].y);
                if min_d.is_none_or(|m| d < m.0) {
                    min_d = Some((d, (g[a].agent, g[b].agent), g[a].t));
                }
            }
        }
    }

    let compression = rows.iter().find(|r| r.packet_params > 0).map(|r| {
        let rep = CompressionReport::new(STATE_DIM, r.packet_samples, r.packet_params, OVERHEAD_SLOTS);
        CompressionSummary {
            params: r.packet_params,
            samples: r.packet_samples,
            raw: rep.raw,
            factor: rep.factor,
            factor_params_only: rep.factor_params_only,
        }
    });

    let sent: usize = rows.iter().map(|r| r.packets_out).sum();
    let delivered: usize = rows.iter().map(|r| r.packets_in).sum();
    let dropped: usize = rows.iter().map(|r| r.dropped_in).sum();
    let delay_sum: f64 = rows.iter().map(|r| r.delay_sum_in).sum();

    let after: Vec<&&[StepRow]> = groups.iter().filter(|g| g[0].t >= mc.transient && g.iter().all(|r| r.sgc_ok.is_some())).collect();
    let sgc_ok = after.iter().filter(|g| g.iter().all(|r| r.sgc_ok == Some(true))).count();
    let window: Vec<&&[StepRow]> = groups
        .iter()
        .filter(|g| g[0].t >= final_time - mc.residual_window && g.iter().all(|r| r.residual.is_some()))
        .collect();
    let res_ok = window.iter().filter(|g| g.iter().all(|r| r.residual.is_some_and(|v| v <= 0.0))).count();
    let res_worst = window.iter().flat_map(|g| g.iter().filter_map(|r| r.residual)).reduce(f64::max);

    let rate = |k: usize, n: usize| (n > 0).then(|| k as f64 / n as f64);
    Metrics {
        steps: groups.len(),
        agents,
        final_time,
        min_pairwise_distance: min_d.map(|m| m.0),
        min_distance_pair: min_d.map(|m| m.1),
        min_distance_time: min_d.map(|m| m.2),
        initial_formation_error: groups.first().map_or(vec![], |g| g.iter().map(|r| r.formation_error).collect()),
        final_formation_error: groups.last().map_or(vec![], |g| g.iter().map(|r| r.formation_error).collect()),
        compression,
        xi_hat_max: rows.iter().map(|r| r.xi_hat).fold(0.0, f64::max),
        packets_sent: sent,
        packets_delivered: delivered,
        packets_dropped: dropped,
        packets_in_flight: sent - delivered - dropped,
        packets_stale: rows.iter().map(|r| r.stale_in).sum(),
        packets_late: rows.iter().map(|r| r.late_in).sum(),
        drop_rate: if sent > 0 { dropped as f64 / sent as f64 } else { 0.0 },
        mean_delay: if delivered > 0 { delay_sum / delivered as f64 } else { 0.0 },
        max_delay: rows.iter().map(|r| r.delay_max_in).fold(0.0, f64::max),
        transient: mc.transient,
        sgc_rate_after_transient: rate(sgc_ok, after.len()),
        sgc_steps_after_transient: after.len(),
        sgc_agent_violations: rows.iter().filter(|r| r.sgc_ok == Some(false)).count(),
        residual_window: mc.residual_window,
        residual_rate_final_window: rate(res_ok, window.len()),
        residual_steps_final_window: window.len(),
        residual_worst_final_window: res_worst,
        mean_iterations: if rows.is_empty() { 0.0 } else { rows.iter().map(|r| r.iterations as f64).sum::<f64>() / rows.len() as f64 },
        infeasible_solves: rows.iter().filter(|r| !r.feasible).count(),
        fallback_solves: rows.iter().filter(|r| r.fallback).count(),
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> ScenarioError {
    ScenarioError::Io(format!("{}: {e}", path.display()))
}

pub fn write_rows(path: &Path, rows: &[StepRow]) -> Result<(), ScenarioError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(|e| io_err(path, e))?;
    w.write_record(RUN_HEADER).map_err(|e| io_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_rows(path: &Path) -> Result<Vec<StepRow>, ScenarioError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    let header = r.headers().map_err(|e| io_err(path, e))?.clone();
    if header.iter().ne(RUN_HEADER) {
        return Err(io_err(path, "unexpected run log header"));
    }
    r.deserialize().map(|row| row.map_err(|e| io_err(path, e))).collect()
}

#[derive(Serialize)]
struct Summary<'a> {
    metrics: &'a super::log::Metrics,
    filter: &'a Option<super::runner::FilterSummary>,
    edges: &'a [super::runner::EdgeRecord],
}

#[derive(Serialize)]
struct TrajectoryRow {
    t: f64,
    agent: usize,
    x: f64,
    y: f64,
    theta: f64,
    formation_error: f64,
}

#[derive(Serialize)]
struct SgcRow {
    t: f64,
    agent: usize,
    v: f64,
    max_gain: Option<f64>,
    sgc_ok: Option<bool>,
    residual: Option<f64>,
    xi_hat: f64,
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<(), ScenarioError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ScenarioError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

/// Writes `run.csv`, `summary.json`, `terminal_design.json` and the plot
/// series `trajectories.csv` and `sgc.csv` into `dir`.
pub fn emit(out: &RunOutput, dir: &Path) -> Result<(), ScenarioError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    write_rows(&dir.join("run.csv"), &out.rows)?;
    write_json(
        &dir.join("summary.json"),
        &Summary {
            metrics: &out.metrics,
            filter: &out.filter,
            edges: &out.edges,
        },
    )?;
    write_json(&dir.join("terminal_design.json"), &out.terminal)?;
    write_csv(
        &dir.join("trajectories.csv"),
        out.rows.iter().map(|r| TrajectoryRow {
            t: r.t,
            agent: r.agent,
            x: r.x,
            y: r.y,
            theta: r.theta,
            formation_error: r.formation_error,
        }),
    )?;
    write_csv(
        &dir.join("sgc.csv"),
        out.rows.iter().map(|r| SgcRow {
            t: r.t,
            agent: r.agent,
            v: r.v,
            max_gain: r.max_gain,
            sgc_ok: r.sgc_ok,
            residual: r.residual,
            xi_hat: r.xi_hat,
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(step: usize, agent: usize, x: f64, y: f64) -> StepRow {
        StepRow {
            step,
            t: step as f64 * 0.1,
            agent,
            x,
            y,
            vx: 0.0,
            vy: 0.0,
            theta: 0.0,
            omega: 0.0,
            u_r: 0.0,
            u_l: 0.0,
            j: 1.0,
            phi: 0.0,
            j_mod: 1.0,
            v: 1.0,
            iterations: 3,
            feasible: true,
            fallback: false,
            active_neighbors: 0,
            x_norm: 0.0,
            w_norm: 0.0,
            xi_hat: 0.0,
            max_gain: Some(0.1),
            sgc_ok: Some(true),
            residual: Some(-1.0),
            formation_error: 0.5,
            packets_in: 1,
            packets_out: 1,
            dropped_in: 0,
            stale_in: 0,
            late_in: 0,
            delay_sum_in: 0.25,
            delay_max_in: 0.25,
            packet_params: 84,
            packet_samples: 50,
        }
    }

    #[test]
    fn header_matches_row_fields() {
        let mut w = csv::Writer::from_writer(vec![]);
        w.serialize(row(0, 0, 0.0, 0.0)).unwrap();
        let text = String::from_utf8(w.into_inner().unwrap()).unwrap();
        assert_eq!(text.lines().next().unwrap(), RUN_HEADER.join(","));
    }

    #[test]
    fn empty_log_writes_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.csv");
        write_rows(&p, &[]).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap().trim_end(), RUN_HEADER.join(","));
        assert!(read_rows(&p).unwrap().is_empty());
        let m = compute_metrics(&[], &MetricsConfig::default());
        assert_eq!(m.steps, 0);
        assert_eq!(m.min_pairwise_distance, None);
    }

    #[test]
    fn metrics_from_rows() {
        let rows = vec![row(0, 0, 0.0, 0.0), row(0, 1, 3.0, 4.0), row(1, 0, 0.0, 0.0), row(1, 1, 0.0, 2.0)];
        let m = compute_metrics(&rows, &MetricsConfig { transient: 0.0, residual_window: 10.0 });
        assert_eq!(m.steps, 2);
        assert_eq!(m.agents, 2);
        assert_eq!(m.min_pairwise_distance, Some(2.0));
        assert_eq!(m.min_distance_pair, Some((0, 1)));
        assert_eq!(m.packets_sent, 4);
        assert_eq!(m.packets_in_flight, 0);
        assert!((m.mean_delay - 0.25).abs() < 1e-15);
        let c = m.compression.unwrap();
        assert_eq!((c.params, c.raw), (84, 300));
        assert_eq!(m.sgc_rate_after_transient, Some(1.0));
        assert_eq!(m.residual_rate_final_window, Some(1.0));
    }

    #[test]
    fn rows_round_trip_through_csv() {
        let mut rows = vec![row(0, 0, 0.1, 1.0 / 3.0), row(0, 1, -7.25e-9, 1e300)];
        rows[1].max_gain = None;
        rows[1].sgc_ok = None;
        rows[1].residual = None;
        rows[0].t = std::f64::consts::PI;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.csv");
        write_rows(&p, &rows).unwrap();
        assert_eq!(read_rows(&p).unwrap(), rows);
    }
}
