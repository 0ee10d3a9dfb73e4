//! Scenario configuration: TOML schema, defaults and validation.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{InputMode, TrainSettings};
use crate::dynamics::{ConstraintSets, HeadingDrag, TorqueMode, VehicleParams, STATE_DIM};
use crate::monitor::MonitorSettings;
use crate::nmpc::SolverSettings;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Invalid(msg.into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VehicleConfig {
    pub mass: f64,
    pub inertia: f64,
    pub mu1: f64,
    pub mu2: f64,
    pub arm: f64,
    pub torque_mode: TorqueMode,
    pub heading_drag: HeadingDrag,
    pub u_max: f64,
    pub omega_max: f64,
    /// `[x_min, x_max, y_min, y_max]`.
    pub position_box: Option<[f64; 4]>,
}

impl Default for VehicleConfig {
    fn default() -> Self {
        let p = VehicleParams::<f64>::default();
        Self {
            mass: p.mass,
            inertia: p.inertia,
            mu1: p.mu1,
            mu2: p.mu2,
            arm: p.arm,
            torque_mode: p.torque_mode,
            heading_drag: p.heading_drag,
            u_max: 6.0,
            omega_max: 1.0,
            position_box: None,
        }
    }
}

impl VehicleConfig {
    pub fn params(&self, dt: f64) -> VehicleParams<f64> {
        VehicleParams {
            mass: self.mass,
            inertia: self.inertia,
            mu1: self.mu1,
            mu2: self.mu2,
            arm: self.arm,
            dt,
            torque_mode: self.torque_mode,
            heading_drag: self.heading_drag,
        }
    }

    pub fn constraints(&self) -> ConstraintSets<f64> {
        ConstraintSets {
            u_min: [-self.u_max; 2],
            u_max: [self.u_max; 2],
            omega_max: self.omega_max,
            position_box: self.position_box,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightConfig {
    pub q_diag: [f64; STATE_DIM],
    pub r_diag: [f64; 2],
    /// `S^{ij} = neighbor_scale * Q`.
    pub neighbor_scale: f64,
    /// Extra factor on the leader's neighbor weights.
    pub leader_neighbor_scale: f64,
}

impl Default for WeightConfig {
    fn default() -> Self {
        Self {
            q_diag: [0.1, 0.1, 1.0, 0.1, 1.0, 0.1],
            r_diag: [0.01, 0.01],
            neighbor_scale: 0.25,
            leader_neighbor_scale: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HorizonConfig {
    pub prediction: usize,
    pub control: usize,
}

impl Default for HorizonConfig {
    fn default() -> Self {
        Self {
            prediction: 50,
            control: 15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TerminalConfig {
    /// Design speed of the cruise linearization [m/s].
    pub cruise_speed: f64,
    pub strictness: f64,
    pub level_iterations: usize,
    pub decrease_samples: usize,
    /// Enforce `x_N` in the terminal set.
    pub constraint: bool,
    pub audit_samples: usize,
    pub audit_steps: usize,
}

impl Default for TerminalConfig {
    fn default() -> Self {
        Self {
            cruise_speed: 5.0,
            strictness: 0.1,
            level_iterations: 40,
            decrease_samples: 400,
            constraint: true,
            audit_samples: 100,
            audit_steps: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollisionConfig {
    pub enabled: bool,
    pub r_min: f64,
    pub v_max: f64,
    pub b_bar: f64,
    pub lambda_max: f64,
    /// Separation floor entering the ratio bound.
    pub r_floor: f64,
    /// Bound on the error-state norm used for the Lipschitz surrogates.
    pub state_bound: f64,
    /// Replaces the computed ratio bound.
    pub a_bar: Option<f64>,
}

impl Default for CollisionConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            r_min: 5.0,
            v_max: 40.0,
            b_bar: 1.5,
            lambda_max: 1.0,
            r_floor: 5.0,
            state_bound: 1.0,
            a_bar: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelConfig {
    pub delay_min: f64,
    pub delay_max: f64,
    pub drop_threshold: f64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            delay_min: 0.1,
            delay_max: 0.6,
            drop_threshold: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecConfig {
    pub hidden: usize,
    pub mode: InputMode,
    /// Ship raw trajectories instead of networks.
    pub passthrough: bool,
    /// Linear continuation allowed past a packet's support [s].
    pub extrapolation: f64,
    pub training: TrainSettings,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            hidden: 6,
            mode: InputMode::PerState,
            passthrough: false,
            extrapolation: 2.0,
            training: TrainSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LeaderConfig {
    pub waypoints: Vec<[f64; 2]>,
    /// Speed of the virtual reference along the waypoint legs [m/s].
    pub speed: f64,
    /// Radius of the arcs that round the route's corners [m]; 0 keeps
    /// sharp corners.
    pub turn_radius: f64,
}

impl Default for LeaderConfig {
    fn default() -> Self {
        Self {
            waypoints: vec![[0.0, 0.0], [0.0, 100.0], [2000.0, 100.0]],
            speed: 5.0,
            turn_radius: 50.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    /// Formation slot in the world frame; the leader's slot is the origin
    /// of the pattern.
    pub slot: [f64; 2],
    /// `[x, y, vx, vy, theta, omega]`.
    pub initial: [f64; STATE_DIM],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// Steps before this time are excluded from the small-gain rate [s].
    pub transient: f64,
    /// Length of the final window of the residual audit [s].
    pub residual_window: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            transient: 5.0,
            residual_window: 20.0,
        }
    }
}

/// Agent 0 is the leader.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub duration: f64,
    #[serde(default = "default_sample_time")]
    pub sample_time: f64,
    /// Directed transmission links `[from, to]`.
    pub links: Vec<[usize; 2]>,
    pub agents: Vec<AgentConfig>,
    #[serde(default)]
    pub leader: LeaderConfig,
    #[serde(default)]
    pub vehicle: VehicleConfig,
    #[serde(default)]
    pub weights: WeightConfig,
    #[serde(default)]
    pub horizon: HorizonConfig,
    #[serde(default)]
    pub terminal: TerminalConfig,
    #[serde(default)]
    pub solver: SolverSettings,
    #[serde(default)]
    pub collision: CollisionConfig,
    #[serde(default)]
    pub channel: ChannelConfig,
    #[serde(default)]
    pub codec: CodecConfig,
    #[serde(default)]
    pub monitor: MonitorSettings,
    #[serde(default)]
    pub metrics: MetricsConfig,
}

fn default_sample_time() -> f64 {
    0.1
}

/// Five-slot pattern: leader at the apex of a 30 m equilateral triangle,
/// two slots at the side midpoints and two at the far corners.
pub fn triangle_slots(side: f64) -> [[f64; 2]; 5] {
    let h = side * 3f64.sqrt() / 2.0;
    [
        [0.0, 0.0],
        [-h / 2.0, side / 4.0],
        [-h / 2.0, -side / 4.0],
        [-h, side / 2.0],
        [-h, -side / 2.0],
    ]
}

impl ScenarioConfig {
    /// Five agents on the triangle pattern, right-angle legs, delays
    /// uniform on `[T, 6T]`.
    pub fn nominal() -> Self {
        let slots = triangle_slots(30.0);
        let half_pi = std::f64::consts::FRAC_PI_2;
        let starts = [[0.0, 0.0], [-16.5, 4.0], [-9.0, -11.0], [-22.0, 19.0], [-31.0, -12.0]];
        Self {
            seed: 7,
            duration: 60.0,
            sample_time: 0.1,
            links: vec![[0, 1], [1, 0], [0, 2], [2, 0], [1, 2], [2, 1], [1, 3], [2, 4]],
            agents: slots
                .iter()
                .zip(starts)
                .map(|(s, p)| AgentConfig {
                    slot: *s,
                    initial: [p[0], p[1], 0.0, 0.0, half_pi, 0.0],
                })
                .collect(),
            leader: LeaderConfig::default(),
            vehicle: VehicleConfig::default(),
            weights: WeightConfig::default(),
            horizon: HorizonConfig::default(),
            terminal: TerminalConfig::default(),
            solver: SolverSettings::default(),
            collision: CollisionConfig::default(),
            channel: ChannelConfig::default(),
            codec: CodecConfig::default(),
            monitor: MonitorSettings::default(),
            metrics: MetricsConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serializes")
    }

    pub fn steps(&self) -> usize {
        (self.duration / self.sample_time).round() as usize + 1
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let n = self.agents.len();
        if n == 0 {
            return invalid("at least one agent (the leader) is required");
        }
        if n > u16::MAX as usize {
            return invalid("too many agents for the packet id field");
        }
        if !(self.sample_time > 0.0 && self.sample_time.is_finite()) {
            return invalid("sample_time must be positive");
        }
        if !(self.duration >= 0.0 && self.duration.is_finite()) {
            return invalid("duration must be non-negative");
        }
        for (k, [a, b]) in self.links.iter().enumerate() {
            if *a >= n || *b >= n {
                return invalid(format!("link {k} references a missing agent"));
            }
            if a == b {
                return invalid(format!("link {k} is a self loop"));
            }
        }
        for (i, a) in self.agents.iter().enumerate() {
            if !a.initial.iter().chain(&a.slot).all(|v| v.is_finite()) {
                return invalid(format!("agent {i} has a non-finite slot or initial state"));
            }
        }
        if self.leader.waypoints.is_empty() {
            return invalid("leader needs at least one waypoint");
        }
        if !(self.leader.speed >= 0.0 && self.leader.speed.is_finite()) {
            return invalid("leader speed must be non-negative");
        }
        if !(self.leader.turn_radius >= 0.0 && self.leader.turn_radius.is_finite()) {
            return invalid("turn radius must be non-negative");
        }
        let v = &self.vehicle;
        v.params(self.sample_time).validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(v.u_max > 0.0 && v.omega_max > 0.0) {
            return invalid("u_max and omega_max must be positive");
        }
        v.constraints().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let w = &self.weights;
        if !w.q_diag.iter().chain(&w.r_diag).all(|&x| x > 0.0 && x.is_finite()) {
            return invalid("Q and R diagonals must be positive");
        }
        if !(w.neighbor_scale >= 0.0 && w.leader_neighbor_scale >= 0.0) {
            return invalid("neighbor weight scales must be non-negative");
        }
        let h = &self.horizon;
        if h.control == 0 || h.control > h.prediction || h.prediction < 2 || h.prediction > u16::MAX as usize {
            return invalid("need 1 <= control <= prediction and prediction >= 2");
        }
        let t = &self.terminal;
        if !(t.cruise_speed >= 0.0 && t.strictness > 0.0) || t.level_iterations == 0 {
            return invalid("terminal design settings out of range");
        }
        let c = &self.collision;
        if c.enabled && !(c.r_min > 0.0 && c.v_max > 0.0 && c.b_bar > 1.0 && c.lambda_max > 0.0 && c.r_floor >= 0.0 && c.state_bound >= 0.0) {
            return invalid("collision settings out of range (b_bar must exceed 1)");
        }
        if matches!(c.a_bar, Some(a) if !(a >= 0.0)) {
            return invalid("a_bar must be non-negative");
        }
        let ch = &self.channel;
        if !(ch.delay_min >= 0.0 && ch.delay_max >= ch.delay_min && ch.delay_max.is_finite() && ch.drop_threshold >= 0.0) {
            return invalid("channel delays must satisfy 0 <= min <= max and threshold >= 0");
        }
        let cd = &self.codec;
        if cd.hidden == 0 || cd.hidden > u8::MAX as usize {
            return invalid("codec hidden size must be in 1..=255");
        }
        if !(cd.extrapolation >= 0.0) {
            return invalid("codec extrapolation must be non-negative");
        }
        if !(self.monitor.k_bar > 0.0) {
            return invalid("monitor k_bar must be positive");
        }
        if !(self.metrics.transient >= 0.0 && self.metrics.residual_window >= 0.0) {
            return invalid("metric windows must be non-negative");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nominal_is_valid_and_round_trips() {
        let c = ScenarioConfig::nominal();
        c.validate().unwrap();
        assert_eq!(c.steps(), 601);
        assert_eq!(ScenarioConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn shipped_config_matches_nominal() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/nominal.toml");
        assert_eq!(ScenarioConfig::load(&path).unwrap(), ScenarioConfig::nominal());
    }

    #[test]
    fn slots_are_fifteen_apart() {
        let s = triangle_slots(30.0);
        let d = |a: usize, b: usize| (s[a][0] - s[b][0]).hypot(s[a][1] - s[b][1]);
        for (a, b) in [(0, 1), (0, 2), (1, 2), (1, 3), (2, 4)] {
            assert!((d(a, b) - 15.0).abs() < 1e-12);
        }
        assert!((d(3, 4) - 30.0).abs() < 1e-12);
    }

    #[test]
    fn minimal_config_uses_defaults() {
        let c = ScenarioConfig::from_toml("seed = 1\nduration = 2.0\nlinks = []\n[[agents]]\nslot = [0.0, 0.0]\ninitial = [0.0, 0.0, 0.0, 0.0, 0.0, 0.0]\n").unwrap();
        assert_eq!(c.horizon.prediction, 50);
        assert_eq!(c.codec.mode, InputMode::PerState);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut text = ScenarioConfig::nominal().to_toml();
        text.push_str("\n[extra]\nfoo = 1\n");
        assert!(matches!(ScenarioConfig::from_toml(&text), Err(ConfigError::Parse(_))));
        let text = ScenarioConfig::nominal().to_toml().replace("neighbor_scale", "neighbour_scale");
        assert!(matches!(ScenarioConfig::from_toml(&text), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn invalid_values_rejected() {
        let mut c = ScenarioConfig::nominal();
        c.links.push([0, 9]);
        assert!(matches!(c.validate(), Err(ConfigError::Invalid(_))));
        let mut c = ScenarioConfig::nominal();
        c.horizon.control = 60;
        assert!(c.validate().is_err());
        let mut c = ScenarioConfig::nominal();
        c.collision.b_bar = 1.0;
        assert!(c.validate().is_err());
        let mut c = ScenarioConfig::nominal();
        c.agents.clear();
        assert!(c.validate().is_err());
        let mut c = ScenarioConfig::nominal();
        c.channel.delay_min = 0.7;
        assert!(c.validate().is_err());
    }
}
