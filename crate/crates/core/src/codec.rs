//! Trajectory compression with a one-hidden-layer tanh network: training,
//! packet encoding, wire format and receiver-side reconstruction.
//!
//! A trajectory of `L` samples spaced `T` apart is fitted as a function of
//! normalized time `tau in [-1, 1]`. In per-state input mode the network
//! sees the Chebyshev features `T_1(tau)..T_n(tau)` instead of `tau`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Packet fields besides the parameters: id, timestamp, sample time,
/// horizon, hidden size and input mode.
pub const OVERHEAD_SLOTS: usize = 6;

const HEADER_BYTES: usize = 2 + 8 + 4 + 2 + 1 + 1;

#[derive(Debug, Error, PartialEq)]
pub enum CodecError {
    #[error("trajectory needs at least two samples")]
    TooShort,
    #[error("hidden layer must have at least one unit")]
    NoHiddenUnits,
    #[error("trajectory samples have inconsistent width")]
    Ragged,
    #[error("training diverged")]
    Diverged,
    #[error("malformed packet: {0}")]
    Malformed(&'static str),
    #[error("negative delay")]
    NegativeDelay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputMode {
    /// Normalized time only.
    #[serde(rename = "1")]
    Single,
    /// One Chebyshev time feature per state channel.
    #[serde(rename = "n")]
    PerState,
}

impl InputMode {
    fn code(self) -> u8 {
        match self {
            InputMode::Single => 0,
            InputMode::PerState => 1,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(InputMode::Single),
            1 => Some(InputMode::PerState),
            _ => None,
        }
    }

    pub fn input_dim(self, outputs: usize) -> usize {
        match self {
            InputMode::Single => 1,
            InputMode::PerState => outputs,
        }
    }
}

/// `q = H n_in + H + n H + n`.
pub fn parameter_count(hidden: usize, outputs: usize, mode: InputMode) -> usize {
    hidden * mode.input_dim(outputs) + hidden + outputs * hidden + outputs
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub max_epochs: usize,
    /// First-layer gain of the hidden units seeded as copies of the input
    /// features; 0 draws every unit at random.
    pub linear_start: f64,
    pub learning_rate: f64,
    /// First-moment decay of the Adam update.
    pub momentum: f64,
    /// Epochs between checks of the rounded model against the best so far.
    pub check_every: usize,
    /// Early stop when the normalized max error falls below this.
    pub tolerance: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            max_epochs: 2000,
            linear_start: 0.01,
            learning_rate: 0.01,
            momentum: 0.9,
            check_every: 50,
            tolerance: 1e-4,
        }
    }
}

/// Trained network with single-precision parameters laid out as
/// `W1 (H x n_in), b1 (H), W2 (n x H), b2 (n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NnModel {
    pub mode: InputMode,
    pub hidden: usize,
    pub outputs: usize,
    /// Number of trajectory samples the model covers.
    pub samples: usize,
    pub sample_time: f64,
    pub params: Vec<f32>,
    /// Max-abs error per channel on the training grid.
    pub xi_hat: Vec<f64>,
}

fn features(mode: InputMode, n_in: usize, tau: f64, out: &mut [f64]) {
    match mode {
        InputMode::Single => out[0] = tau,
        InputMode::PerState => {
            // Chebyshev recurrence T_{k+1} = 2 tau T_k - T_{k-1}
            let (mut prev, mut cur) = (1.0, tau);
            for v in out.iter_mut().take(n_in) {
                *v = cur;
                let next = 2.0 * tau * cur - prev;
                prev = cur;
                cur = next;
            }
        }
    }
}

fn tau_of(index_time: f64, samples: usize) -> f64 {
    2.0 * index_time / (samples - 1) as f64 - 1.0
}

struct Net {
    n_in: usize,
    h: usize,
    n: usize,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

impl Net {
    fn hidden_layer(&self, x: &[f64], act: &mut [f64]) {
        for (u, a) in act.iter_mut().enumerate() {
            let z: f64 = self.b1[u] + (0..self.n_in).map(|i| self.w1[u * self.n_in + i] * x[i]).sum::<f64>();
            *a = z.tanh();
        }
    }

    fn output(&self, act: &[f64], out: &mut [f64]) {
        for (c, o) in out.iter_mut().enumerate() {
            *o = self.b2[c] + (0..self.h).map(|u| self.w2[c * self.h + u] * act[u]).sum::<f64>();
        }
    }


    fn from_flat(n_in: usize, h: usize, n: usize, p: &[f64]) -> Self {
        let (w1, rest) = p.split_at(h * n_in);
        let (b1, rest) = rest.split_at(h);
        let (w2, b2) = rest.split_at(n * h);
        Self {
            n_in,
            h,
            n,
            w1: w1.to_vec(),
            b1: b1.to_vec(),
            w2: w2.to_vec(),
            b2: b2.to_vec(),
        }
    }

    /// Least-squares output layer for fixed hidden activations.
    fn refit_output(&mut self, acts: &[Vec<f64>], targets: &[Vec<f64>]) {
        let l = acts.len();
        let design = DMatrix::from_fn(l, self.h + 1, |k, u| if u < self.h { acts[k][u] } else { 1.0 });
        let svd = design.svd(true, true);
        // truncation keeps the weights small enough to survive f32 rounding
        let cutoff = 1e-9 * svd.singular_values.max();
        for c in 0..self.n {
            let rhs = DVector::from_fn(l, |k, _| targets[k][c]);
            if let Ok(sol) = svd.solve(&rhs, cutoff) {
                if sol.iter().all(|v| v.is_finite()) {
                    for u in 0..self.h {
                        self.w2[c * self.h + u] = sol[u];
                    }
                    self.b2[c] = sol[self.h];
                }
            }
        }
    }
}

/// Fits the trajectory; deterministic given `seed`. Hidden units are drawn
/// from the seed in unit order, so a larger network starts from the
/// smaller one's units.
pub fn train<S: AsRef<[f64]>>(
    traj: &[S],
    sample_time: f64,
    hidden: usize,
    mode: InputMode,
    settings: &TrainSettings,
    seed: u64,
) -> Result<NnModel, CodecError> {
    let l = traj.len();
    if l < 2 {
        return Err(CodecError::TooShort);
    }
    if hidden == 0 {
        return Err(CodecError::NoHiddenUnits);
    }
    let n = traj[0].as_ref().len();
    if n == 0 || traj.iter().any(|s| s.as_ref().len() != n) {
        return Err(CodecError::Ragged);
    }
    let n_in = mode.input_dim(n);

    // per-channel centering and scaling, folded into the output layer later
    let mut center = vec![0.0; n];
    let mut scale = vec![1.0; n];
    for c in 0..n {
        let (lo, hi) = traj
            .iter()
            .map(|s| s.as_ref()[c])
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        if !(lo.is_finite() && hi.is_finite()) {
            return Err(CodecError::Diverged);
        }
        center[c] = 0.5 * (lo + hi);
        let half = 0.5 * (hi - lo);
        if half > 1e-12 * center[c].abs().max(1.0) {
            scale[c] = half;
        }
    }
    let targets: Vec<Vec<f64>> = traj
        .iter()
        .map(|s| (0..n).map(|c| (s.as_ref()[c] - center[c]) / scale[c]).collect())
        .collect();
    let inputs: Vec<Vec<f64>> = (0..l)
        .map(|k| {
            let mut x = vec![0.0; n_in];
            features(mode, n_in, tau_of(k as f64, l), &mut x);
            x
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Net {
        n_in,
        h: hidden,
        n,
        w1: vec![0.0; hidden * n_in],
        b1: vec![0.0; hidden],
        w2: vec![0.0; n * hidden],
        b2: vec![0.0; n],
    };
    for u in 0..hidden {
        for i in 0..n_in {
            net.w1[u * n_in + i] = rng.random_range(-0.5..0.5);
        }
        net.b1[u] = rng.random_range(-0.5..0.5);
        for c in 0..n {
            net.w2[c * hidden + u] = rng.random_range(-0.5..0.5);
        }
        // unit u starts as a scaled copy of feature u, in the near-linear
        // range of tanh, so the first refit is a polynomial least-squares fit
        if settings.linear_start > 0.0 && u < n_in {
            for i in 0..n_in {
                net.w1[u * n_in + i] = if i == u { settings.linear_start } else { 0.0 };
            }
            net.b1[u] = 0.0;
        }
    }

    let mut acts = vec![vec![0.0; hidden]; l];
    let mut out = vec![0.0; n];
    let hidden_params = hidden * (n_in + 1);
    let (mut m1, mut m2) = (vec![0.0; hidden_params], vec![0.0; hidden_params]);
    let (b1, b2) = (settings.momentum, 0.999);
    let inv = 1.0 / (l * n) as f64;
    let mut best: Option<NnModel> = None;

    // The output layer is always the least-squares optimum for the current
    // hidden layer, so only the hidden layer follows the gradient.
    for epoch in 0..settings.max_epochs {
        for k in 0..l {
            net.hidden_layer(&inputs[k], &mut acts[k]);
        }
        net.refit_output(&acts, &targets);
        let mut worst: f64 = 0.0;
        let mut gw1 = vec![0.0; net.w1.len()];
        let mut gb1 = vec![0.0; hidden];
        for k in 0..l {
            net.output(&acts[k], &mut out);
            for c in 0..n {
                worst = worst.max((out[c] - targets[k][c]).abs());
            }
            for u in 0..hidden {
                let back: f64 = (0..n).map(|c| 2.0 * inv * (out[c] - targets[k][c]) * net.w2[c * hidden + u]).sum();
                let dz = back * (1.0 - acts[k][u] * acts[k][u]);
                gb1[u] += dz;
                for i in 0..n_in {
                    gw1[u * n_in + i] += dz * inputs[k][i];
                }
            }
        }
        let done = worst < settings.tolerance;
        if done || (settings.check_every > 0 && epoch % settings.check_every == 0) {
            if let Some(m) = finish(&net, &center, &scale, traj, mode, sample_time) {
                if best.as_ref().is_none_or(|b| m.xi_hat_max() < b.xi_hat_max()) {
                    best = Some(m);
                }
            }
        }
        if done {
            break;
        }
        let grad: Vec<f64> = gw1.into_iter().chain(gb1).collect();
        if !grad.iter().all(|g| g.is_finite()) {
            break;
        }
        // Adam
        let t = (epoch + 1) as i32;
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - f64::powi(b2, t));
        for (i, g) in grad.iter().enumerate() {
            m1[i] = b1 * m1[i] + (1.0 - b1) * g;
            m2[i] = b2 * m2[i] + (1.0 - b2) * g * g;
            let step = settings.learning_rate * (m1[i] / c1) / ((m2[i] / c2).sqrt() + 1e-12);
            if i < net.w1.len() {
                net.w1[i] -= step;
            } else {
                net.b1[i - net.w1.len()] -= step;
            }
        }
    }
    for k in 0..l {
        net.hidden_layer(&inputs[k], &mut acts[k]);
    }
    net.refit_output(&acts, &targets);
    let last = finish(&net, &center, &scale, traj, mode, sample_time);
    match (best, last) {
        (Some(b), Some(m)) if b.xi_hat_max() < m.xi_hat_max() => Ok(b),
        (_, Some(m)) => Ok(m),
        (Some(b), None) => Ok(b),
        (None, None) => Err(CodecError::Diverged),
    }
}

/// Folds the normalization into the output layer, rounds to the wire
/// precision and measures the decoded error.
fn finish<S: AsRef<[f64]>>(
    net: &Net,
    center: &[f64],
    scale: &[f64],
    traj: &[S],
    mode: InputMode,
    sample_time: f64,
) -> Option<NnModel> {
    let (h, n) = (net.h, net.n);
    let mut w2 = net.w2.clone();
    let mut b2 = net.b2.clone();
    for c in 0..n {
        for u in 0..h {
            w2[c * h + u] *= scale[c];
        }
        b2[c] = b2[c] * scale[c] + center[c];
    }
    let params: Vec<f32> = net
        .w1
        .iter()
        .chain(&net.b1)
        .chain(&w2)
        .chain(&b2)
        .map(|&v| v as f32)
        .collect();
    if !params.iter().all(|v| v.is_finite()) {
        return None;
    }
    let mut model = NnModel {
        mode,
        hidden: h,
        outputs: n,
        samples: traj.len(),
        sample_time: sample_time as f32 as f64,
        params,
        xi_hat: vec![0.0; n],
    };
    for (k, s) in traj.iter().enumerate() {
        let y = model.eval_index(k as f64);
        for c in 0..n {
            model.xi_hat[c] = model.xi_hat[c].max((y[c] - s.as_ref()[c]).abs());
        }
    }
    model.xi_hat.iter().all(|v| v.is_finite()).then_some(model)
}

impl NnModel {
    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    pub fn xi_hat_max(&self) -> f64 {
        self.xi_hat.iter().fold(0.0, |a, &b| a.max(b))
    }

    fn net(&self) -> Net {
        let p: Vec<f64> = self.params.iter().map(|&v| v as f64).collect();
        Net::from_flat(self.mode.input_dim(self.outputs), self.hidden, self.outputs, &p)
    }

    /// Network output at fractional sample index `s` (time `s T` after the
    /// first sample).
    pub fn eval_index(&self, s: f64) -> Vec<f64> {
        let net = self.net();
        let mut x = vec![0.0; net.n_in];
        features(self.mode, net.n_in, tau_of(s, self.samples), &mut x);
        let mut act = vec![0.0; self.hidden];
        let mut out = vec![0.0; self.outputs];
        net.hidden_layer(&x, &mut act);
        net.output(&act, &mut out);
        out
    }

    /// Output at time `t` after the first sample.
    pub fn eval_time(&self, t: f64) -> Vec<f64> {
        self.eval_index(t / self.sample_time)
    }

    pub fn encode(&self, id: u16, timestamp: f64, overhead: usize) -> (TrajectoryPacket, CompressionReport) {
        let packet = TrajectoryPacket {
            id,
            timestamp,
            sample_time: self.sample_time as f32,
            horizon: self.samples as u16,
            hidden: self.hidden as u8,
            mode: self.mode,
            params: self.params.clone(),
        };
        let report = CompressionReport::new(self.outputs, self.samples, self.params.len(), overhead);
        (packet, report)
    }

    pub fn from_packet(p: &TrajectoryPacket) -> Result<Self, CodecError> {
        let h = p.hidden as usize;
        if h == 0 {
            return Err(CodecError::Malformed("zero hidden units"));
        }
        if p.horizon < 2 {
            return Err(CodecError::Malformed("horizon below two samples"));
        }
        if !(p.sample_time > 0.0 && p.sample_time.is_finite()) {
            return Err(CodecError::Malformed("sample time"));
        }
        let q = p.params.len();
        let n = match p.mode {
            InputMode::Single => {
                let rest = q.checked_sub(2 * h).ok_or(CodecError::Malformed("parameter count"))?;
                if rest % (h + 1) != 0 {
                    return Err(CodecError::Malformed("parameter count"));
                }
                rest / (h + 1)
            }
            InputMode::PerState => {
                let rest = q.checked_sub(h).ok_or(CodecError::Malformed("parameter count"))?;
                if rest % (2 * h + 1) != 0 {
                    return Err(CodecError::Malformed("parameter count"));
                }
                rest / (2 * h + 1)
            }
        };
        if n == 0 {
            return Err(CodecError::Malformed("no outputs"));
        }
        if !p.params.iter().all(|v| v.is_finite()) {
            return Err(CodecError::Malformed("non-finite parameter"));
        }
        Ok(Self {
            mode: p.mode,
            hidden: h,
            outputs: n,
            samples: p.horizon as usize,
            sample_time: p.sample_time as f64,
            params: p.params.clone(),
            xi_hat: vec![f64::NAN; n],
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CompressionReport {
    /// `n N_p` floats of the raw trajectory.
    pub raw: usize,
    pub params: usize,
    pub overhead: usize,
    /// `1 - (q + overhead) / (n N_p)`.
    pub factor: f64,
    /// `1 - q / (n N_p)`.
    pub factor_params_only: f64,
}

impl CompressionReport {
    pub fn new(states: usize, horizon: usize, params: usize, overhead: usize) -> Self {
        let raw = states * horizon;
        Self {
            raw,
            params,
            overhead,
            factor: (raw as f64 - (params + overhead) as f64) / raw as f64,
            factor_params_only: (raw as f64 - params as f64) / raw as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPacket {
    pub id: u16,
    /// Time of the first trajectory sample [s].
    pub timestamp: f64,
    pub sample_time: f32,
    /// Number of trajectory samples.
    pub horizon: u16,
    pub hidden: u8,
    pub mode: InputMode,
    pub params: Vec<f32>,
}

impl TrajectoryPacket {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(HEADER_BYTES + 4 * self.params.len());
        b.extend_from_slice(&self.id.to_le_bytes());
        b.extend_from_slice(&self.timestamp.to_le_bytes());
        b.extend_from_slice(&self.sample_time.to_le_bytes());
        b.extend_from_slice(&self.horizon.to_le_bytes());
        b.push(self.hidden);
        b.push(self.mode.code());
        for p in &self.params {
            b.extend_from_slice(&p.to_le_bytes());
        }
        b
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, CodecError> {
        if b.len() < HEADER_BYTES || !(b.len() - HEADER_BYTES).is_multiple_of(4) {
            return Err(CodecError::Malformed("length"));
        }
        let id = u16::from_le_bytes([b[0], b[1]]);
        let timestamp = f64::from_le_bytes(b[2..10].try_into().expect("8 bytes"));
        let sample_time = f32::from_le_bytes(b[10..14].try_into().expect("4 bytes"));
        let horizon = u16::from_le_bytes([b[14], b[15]]);
        let hidden = b[16];
        let mode = InputMode::from_code(b[17]).ok_or(CodecError::Malformed("input mode"))?;
        let params = b[HEADER_BYTES..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Self {
            id,
            timestamp,
            sample_time,
            horizon,
            hidden,
            mode,
            params,
        })
    }

    pub fn len_bytes(&self) -> usize {
        HEADER_BYTES + 4 * self.params.len()
    }
}

/// `local_clock - timestamp` floored at zero; the flag reports a stamp
/// from the future.
pub fn estimate_delay(timestamp: f64, local_clock: f64) -> (f64, bool) {
    let d = local_clock - timestamp;
    if d < 0.0 {
        (0.0, true)
    } else {
        (d, false)
    }
}

/// Evaluation times `delay + k T_rx` relative to the first sample, capped
/// `extrapolation` seconds past the end of the support.
fn receiver_times(delay: f64, t_rx: f64, n_points: usize, support_end: f64, extrapolation: f64) -> Vec<f64> {
    let limit = support_end + extrapolation.max(0.0);
    (0..n_points).map(|k| (delay + k as f64 * t_rx).min(limit)).collect()
}

/// Resamples a packet on the receiver grid. Past the support the model
/// is continued linearly along its final segment.
pub fn reconstruct(
    packet: &TrajectoryPacket,
    t_rx: f64,
    n_points: usize,
    delay: f64,
    extrapolation: f64,
) -> Result<Vec<Vec<f64>>, CodecError> {
    if delay < 0.0 {
        return Err(CodecError::NegativeDelay);
    }
    let model = NnModel::from_packet(packet)?;
    let dt = model.sample_time;
    let support = (model.samples - 1) as f64 * dt;
    let end = model.eval_time(support);
    let slope: Vec<f64> = end.iter().zip(model.eval_time(support - dt)).map(|(a, b)| (a - b) / dt).collect();
    Ok(receiver_times(delay, t_rx, n_points, support, extrapolation)
        .into_iter()
        .map(|t| {
            if t <= support {
                model.eval_time(t)
            } else {
                end.iter().zip(&slope).map(|(e, s)| e + s * (t - support)).collect()
            }
        })
        .collect())
}

/// Uncompressed trajectory used by the pass-through ablation mode.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTrajectory {
    pub id: u16,
    pub timestamp: f64,
    pub sample_time: f64,
    pub samples: Vec<Vec<f64>>,
}

impl RawTrajectory {
    /// Linear interpolation inside the support, linear extrapolation from
    /// the last two samples beyond it.
    pub fn eval_time(&self, t: f64) -> Vec<f64> {
        let l = self.samples.len();
        let s = (t / self.sample_time).max(0.0);
        let i = (s.floor() as usize).min(l - 2);
        let f = s - i as f64;
        let (a, b) = (&self.samples[i], &self.samples[i + 1]);
        a.iter().zip(b).map(|(x, y)| x + f * (y - x)).collect()
    }

    pub fn reconstruct(&self, t_rx: f64, n_points: usize, delay: f64, extrapolation: f64) -> Vec<Vec<f64>> {
        let support = (self.samples.len() - 1) as f64 * self.sample_time;
        receiver_times(delay.max(0.0), t_rx, n_points, support, extrapolation)
            .into_iter()
            .map(|t| self.eval_time(t))
            .collect()
    }
}
