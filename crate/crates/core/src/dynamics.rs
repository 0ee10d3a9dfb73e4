//! Planar twin-thruster vehicle: continuous model, RK4 discretization,
//! exact Jacobians of the discrete map and constraint checks.
//!
//! State layout is `[x, y, vx, vy, theta, omega]`, input layout is
//! `[u_right, u_left]`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

pub const STATE_DIM: usize = 6;
pub const INPUT_DIM: usize = 2;

/// Row-major 6x6 matrix.
pub type Mat6<T> = [[T; STATE_DIM]; STATE_DIM];
/// Row-major 6x2 matrix.
pub type Mat62<T> = [[T; INPUT_DIM]; STATE_DIM];

#[derive(Debug, Error, PartialEq)]
pub enum DynamicsError {
    #[error("non-finite state after integration step")]
    NonFinite,
    #[error("invalid vehicle parameters: {0}")]
    InvalidParams(&'static str),
    #[error("invalid constraint set: {0}")]
    InvalidConstraints(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VehicleState<T> {
    pub x: T,
    pub y: T,
    pub vx: T,
    pub vy: T,
    pub theta: T,
    pub omega: T,
}

impl<T: Real> VehicleState<T> {
    pub fn from_array(a: [T; STATE_DIM]) -> Self {
        Self {
            x: a[0],
            y: a[1],
            vx: a[2],
            vy: a[3],
            theta: a[4],
            omega: a[5],
        }
    }

    pub fn to_array(&self) -> [T; STATE_DIM] {
        [self.x, self.y, self.vx, self.vy, self.theta, self.omega]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Rotates position, velocity and heading about the origin by `phi`.
    pub fn rotated(&self, phi: T) -> Self {
        let (s, c) = phi.sin_cos();
        Self {
            x: c * self.x - s * self.y,
            y: s * self.x + c * self.y,
            vx: c * self.vx - s * self.vy,
            vy: s * self.vx + c * self.vy,
            theta: self.theta + phi,
            omega: self.omega,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VehicleInput<T> {
    pub right: T,
    pub left: T,
}

impl<T: Real> VehicleInput<T> {
    pub fn new(right: T, left: T) -> Self {
        Self { right, left }
    }

    pub fn to_array(&self) -> [T; INPUT_DIM] {
        [self.right, self.left]
    }

    pub fn from_array(a: [T; INPUT_DIM]) -> Self {
        Self {
            right: a[0],
            left: a[1],
        }
    }
}

/// How the two thrusters produce yaw torque.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TorqueMode {
    /// `(u_R - u_L) * r_v`
    #[default]
    Diff,
    /// `(u_R + u_L) * r_v`, heading not independently steerable.
    Sum,
}

/// Which drag coefficient damps the heading rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadingDrag {
    #[default]
    Mu2,
    Mu1,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleParams<T> {
    /// Mass [kg].
    pub mass: T,
    /// Yaw inertia [kg m^2].
    pub inertia: T,
    /// Translational drag.
    pub mu1: T,
    /// Rotational drag.
    pub mu2: T,
    /// Thruster moment arm [m].
    pub arm: T,
    /// Sample time [s].
    pub dt: T,
    pub torque_mode: TorqueMode,
    pub heading_drag: HeadingDrag,
}

impl<T: Real> Default for VehicleParams<T> {
    fn default() -> Self {
        Self {
            mass: T::lit(10.0),
            inertia: T::one(),
            mu1: T::one(),
            mu2: T::one(),
            arm: T::lit(0.5),
            dt: T::lit(0.1),
            torque_mode: TorqueMode::Diff,
            heading_drag: HeadingDrag::Mu2,
        }
    }
}

impl<T: Real> VehicleParams<T> {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        if !(self.mass > T::zero()) {
            return Err(DynamicsError::InvalidParams("mass must be positive"));
        }
        if !(self.inertia > T::zero()) {
            return Err(DynamicsError::InvalidParams("inertia must be positive"));
        }
        if !(self.dt > T::zero()) {
            return Err(DynamicsError::InvalidParams("sample time must be positive"));
        }
        if !(self.mu1 >= T::zero() && self.mu2 >= T::zero()) {
            return Err(DynamicsError::InvalidParams("drag must be non-negative"));
        }
        if !self.arm.is_finite() {
            return Err(DynamicsError::InvalidParams("moment arm must be finite"));
        }
        Ok(())
    }

    fn heading_mu(&self) -> T {
        match self.heading_drag {
            HeadingDrag::Mu2 => self.mu2,
            HeadingDrag::Mu1 => self.mu1,
        }
    }

    /// Yaw torque derivative with respect to `[u_R, u_L]`.
    fn torque_gains(&self) -> [T; INPUT_DIM] {
        match self.torque_mode {
            TorqueMode::Diff => [self.arm, -self.arm],
            TorqueMode::Sum => [self.arm, self.arm],
        }
    }

    /// Thrust per thruster that holds `speed` against translational drag.
    pub fn cruise_thrust(&self, speed: T) -> T {
        self.mu1 * speed / T::lit(2.0)
    }
}

/// Continuous-time vector field.
pub fn derivative<T: Real>(s: &[T; STATE_DIM], u: &[T; INPUT_DIM], p: &VehicleParams<T>) -> [T; STATE_DIM] {
    let thrust = u[0] + u[1];
    let (sin_t, cos_t) = s[4].sin_cos();
    let g = p.torque_gains();
    [
        s[2],
        s[3],
        (-p.mu1 * s[2] + thrust * cos_t) / p.mass,
        (-p.mu1 * s[3] + thrust * sin_t) / p.mass,
        s[5],
        (-p.heading_mu() * s[5] + g[0] * u[0] + g[1] * u[1]) / p.inertia,
    ]
}

/// Jacobians of the continuous vector field.
pub fn derivative_jacobians<T: Real>(
    s: &[T; STATE_DIM],
    u: &[T; INPUT_DIM],
    p: &VehicleParams<T>,
) -> (Mat6<T>, Mat62<T>) {
    let z = T::zero();
    let thrust = u[0] + u[1];
    let (sin_t, cos_t) = s[4].sin_cos();
    let mut a = [[z; STATE_DIM]; STATE_DIM];
    a[0][2] = T::one();
    a[1][3] = T::one();
    a[2][2] = -p.mu1 / p.mass;
    a[2][4] = -thrust * sin_t / p.mass;
    a[3][3] = -p.mu1 / p.mass;
    a[3][4] = thrust * cos_t / p.mass;
    a[4][5] = T::one();
    a[5][5] = -p.heading_mu() / p.inertia;

    let g = p.torque_gains();
    let mut b = [[z; INPUT_DIM]; STATE_DIM];
    for k in 0..INPUT_DIM {
        b[2][k] = cos_t / p.mass;
        b[3][k] = sin_t / p.mass;
        b[5][k] = g[k] / p.inertia;
    }
    (a, b)
}

#[inline]
fn axpy<T: Real>(x: &[T; STATE_DIM], h: T, d: &[T; STATE_DIM]) -> [T; STATE_DIM] {
    std::array::from_fn(|i| x[i] + h * d[i])
}

/// One RK4 step of length `p.dt`, without finiteness checks.
pub fn rk4_step<T: Real>(s: &[T; STATE_DIM], u: &[T; INPUT_DIM], p: &VehicleParams<T>) -> [T; STATE_DIM] {
    let h = p.dt;
    let half = h / T::lit(2.0);
    let k1 = derivative(s, u, p);
    let k2 = derivative(&axpy(s, half, &k1), u, p);
    let k3 = derivative(&axpy(s, half, &k2), u, p);
    let k4 = derivative(&axpy(s, h, &k3), u, p);
    let sixth = h / T::lit(6.0);
    let two = T::lit(2.0);
    std::array::from_fn(|i| s[i] + sixth * (k1[i] + two * k2[i] + two * k3[i] + k4[i]))
}

fn mat6_mul<T: Real>(a: &Mat6<T>, b: &Mat6<T>) -> Mat6<T> {
    let mut out = [[T::zero(); STATE_DIM]; STATE_DIM];
    for i in 0..STATE_DIM {
        for k in 0..STATE_DIM {
            let aik = a[i][k];
            if aik == T::zero() {
                continue;
            }
            for j in 0..STATE_DIM {
                out[i][j] += aik * b[k][j];
            }
        }
    }
    out
}

fn mat62_mul<T: Real>(a: &Mat6<T>, b: &Mat62<T>) -> Mat62<T> {
    let mut out = [[T::zero(); INPUT_DIM]; STATE_DIM];
    for i in 0..STATE_DIM {
        for k in 0..STATE_DIM {
            let aik = a[i][k];
            if aik == T::zero() {
                continue;
            }
            for j in 0..INPUT_DIM {
                out[i][j] += aik * b[k][j];
            }
        }
    }
    out
}

/// RK4 step together with the exact Jacobians of the discrete map,
/// obtained by differentiating every stage.
pub fn rk4_step_with_jacobians<T: Real>(
    s: &[T; STATE_DIM],
    u: &[T; INPUT_DIM],
    p: &VehicleParams<T>,
) -> ([T; STATE_DIM], Mat6<T>, Mat62<T>) {
    let h = p.dt;
    let half = h / T::lit(2.0);
    let one = T::one();
    let z = T::zero();

    // dk/dx and dk/du for each stage
    let k1 = derivative(s, u, p);
    let (a1, b1) = derivative_jacobians(s, u, p);
    let dk1x = a1;
    let dk1u = b1;

    let s2 = axpy(s, half, &k1);
    let k2 = derivative(&s2, u, p);
    let (a2, b2) = derivative_jacobians(&s2, u, p);
    // ds2/dx = I + h/2 dk1/dx
    let ds2x: Mat6<T> = std::array::from_fn(|i| std::array::from_fn(|j| if i == j { one } else { z } + half * dk1x[i][j]));
    let ds2u: Mat62<T> = std::array::from_fn(|i| std::array::from_fn(|j| half * dk1u[i][j]));
    let dk2x = mat6_mul(&a2, &ds2x);
    let mut dk2u = mat62_mul(&a2, &ds2u);
    add62(&mut dk2u, &b2);

    let s3 = axpy(s, half, &k2);
    let k3 = derivative(&s3, u, p);
    let (a3, b3) = derivative_jacobians(&s3, u, p);
    let ds3x: Mat6<T> = std::array::from_fn(|i| std::array::from_fn(|j| if i == j { one } else { z } + half * dk2x[i][j]));
    let ds3u: Mat62<T> = std::array::from_fn(|i| std::array::from_fn(|j| half * dk2u[i][j]));
    let dk3x = mat6_mul(&a3, &ds3x);
    let mut dk3u = mat62_mul(&a3, &ds3u);
    add62(&mut dk3u, &b3);

    let s4 = axpy(s, h, &k3);
    let k4 = derivative(&s4, u, p);
    let (a4, b4) = derivative_jacobians(&s4, u, p);
    let ds4x: Mat6<T> = std::array::from_fn(|i| std::array::from_fn(|j| if i == j { one } else { z } + h * dk3x[i][j]));
    let ds4u: Mat62<T> = std::array::from_fn(|i| std::array::from_fn(|j| h * dk3u[i][j]));
    let dk4x = mat6_mul(&a4, &ds4x);
    let mut dk4u = mat62_mul(&a4, &ds4u);
    add62(&mut dk4u, &b4);

    let sixth = h / T::lit(6.0);
    let two = T::lit(2.0);
    let next = std::array::from_fn(|i| s[i] + sixth * (k1[i] + two * k2[i] + two * k3[i] + k4[i]));
    let ax = std::array::from_fn(|i| {
        std::array::from_fn(|j| {
            let id = if i == j { one } else { z };
            id + sixth * (dk1x[i][j] + two * dk2x[i][j] + two * dk3x[i][j] + dk4x[i][j])
        })
    });
    let bu = std::array::from_fn(|i| {
        std::array::from_fn(|j| sixth * (dk1u[i][j] + two * dk2u[i][j] + two * dk3u[i][j] + dk4u[i][j]))
    });
    (next, ax, bu)
}

fn add62<T: Real>(a: &mut Mat62<T>, b: &Mat62<T>) {
    for i in 0..STATE_DIM {
        for j in 0..INPUT_DIM {
            a[i][j] += b[i][j];
        }
    }
}

/// Advances the vehicle by one sample time.
pub fn step<T: Real>(
    s: &VehicleState<T>,
    u: &VehicleInput<T>,
    p: &VehicleParams<T>,
) -> Result<VehicleState<T>, DynamicsError> {
    let next = VehicleState::from_array(rk4_step(&s.to_array(), &u.to_array(), p));
    if next.is_finite() {
        Ok(next)
    } else {
        Err(DynamicsError::NonFinite)
    }
}

/// Jacobians `(A_o, B_o)` of the discrete-time map at `(s, u)`.
pub fn linearize<T: Real>(s: &VehicleState<T>, u: &VehicleInput<T>, p: &VehicleParams<T>) -> (Mat6<T>, Mat62<T>) {
    let (_, a, b) = rk4_step_with_jacobians(&s.to_array(), &u.to_array(), p);
    (a, b)
}

/// Input box and state bounds. The input bound is symmetric per thruster.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSets<T> {
    pub u_min: [T; INPUT_DIM],
    pub u_max: [T; INPUT_DIM],
    /// Bound on `|omega|` [rad/s].
    pub omega_max: T,
    /// Optional `[x_min, x_max, y_min, y_max]` box.
    pub position_box: Option<[T; 4]>,
}

impl<T: Real> Default for ConstraintSets<T> {
    fn default() -> Self {
        let six = T::lit(6.0);
        Self {
            u_min: [-six, -six],
            u_max: [six, six],
            omega_max: T::one(),
            position_box: None,
        }
    }
}

impl<T: Real> ConstraintSets<T> {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        for k in 0..INPUT_DIM {
            if !(self.u_min[k] <= self.u_max[k]) {
                return Err(DynamicsError::InvalidConstraints("input bounds out of order"));
            }
        }
        if !(self.omega_max >= T::zero()) {
            return Err(DynamicsError::InvalidConstraints("heading-rate bound must be non-negative"));
        }
        if let Some(b) = self.position_box {
            if !(b[0] <= b[1] && b[2] <= b[3]) {
                return Err(DynamicsError::InvalidConstraints("position box out of order"));
            }
        }
        Ok(())
    }

    pub fn input_ok(&self, u: &VehicleInput<T>) -> bool {
        let a = u.to_array();
        (0..INPUT_DIM).all(|k| a[k] >= self.u_min[k] && a[k] <= self.u_max[k])
    }

    pub fn state_ok(&self, s: &VehicleState<T>) -> bool {
        if !(s.omega.abs() <= self.omega_max) {
            return false;
        }
        match self.position_box {
            Some(b) => s.x >= b[0] && s.x <= b[1] && s.y >= b[2] && s.y <= b[3],
            None => true,
        }
    }

    pub fn clamp_input(&self, u: [T; INPUT_DIM]) -> [T; INPUT_DIM] {
        std::array::from_fn(|k| u[k].max(self.u_min[k]).min(self.u_max[k]))
    }
}

/// True iff both the state and the input satisfy every bound (closed sets).
pub fn check_constraints<T: Real>(s: &VehicleState<T>, u: &VehicleInput<T>, c: &ConstraintSets<T>) -> bool {
    c.input_ok(u) && c.state_ok(s)
}
