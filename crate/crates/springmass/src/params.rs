//! Physical constants and kinematic limits of the template model.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

/// Template model parameters: point mass on a massless prismatic spring leg
/// with a virtual hip offset and a rectangular force-application foot.
///
/// Lengths in metres, mass in kilograms, stiffness in N/m, angles in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TemplateParams {
    /// Total mass.
    pub m: f64,
    /// Leg spring stiffness.
    pub k: f64,
    /// Leg rest length.
    pub r0: f64,
    /// Lateral hip offset from the CoM.
    pub yh: f64,
    /// Gravity magnitude (acts along -z).
    pub g: f64,
    /// Friction coefficient.
    pub mu: f64,
    /// Foot rectangle extent along x.
    pub foot_len: f64,
    /// Foot rectangle extent along y.
    pub foot_wid: f64,
    /// Virtual leg length limits.
    pub lh_min: f64,
    pub lh_max: f64,
    /// Longitudinal touchdown angle limits.
    pub th1_min: f64,
    pub th1_max: f64,
    /// Lateral touchdown angle limits.
    pub th2_min: f64,
    pub th2_max: f64,
}

impl Default for TemplateParams {
    fn default() -> Self {
        // Mass picked so the dimensionless leg stiffness k*r0/(m*g) is ~10
        // at the middle grid stiffness of 8000 N/m.
        Self {
            m: 73.4,
            k: 8000.0,
            r0: 0.9,
            yh: 0.1,
            g: 9.81,
            mu: 0.6,
            foot_len: 0.2,
            foot_wid: 0.1,
            lh_min: 0.6,
            lh_max: 0.945,
            th1_min: -0.6,
            th1_max: 0.6,
            th2_min: -0.3,
            th2_max: 0.3,
        }
    }
}

/// A parameter validation failure, naming the offending field.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid template parameter: {0}")]
pub struct ParamError(pub &'static str);

impl TemplateParams {
    /// Checks the structural invariants of the parameter set.
    pub fn validate(&self) -> Result<(), ParamError> {
        if !(self.m > 0.0) {
            return Err(ParamError("m must be positive"));
        }
        if !(self.k > 0.0) {
            return Err(ParamError("k must be positive"));
        }
        if !(self.r0 > 0.0) {
            return Err(ParamError("r0 must be positive"));
        }
        if !(self.g > 0.0) {
            return Err(ParamError("g must be positive"));
        }
        if !(self.mu > 0.0) {
            return Err(ParamError("mu must be positive"));
        }
        if !(self.foot_len > 0.0 && self.foot_wid > 0.0) {
            return Err(ParamError("foot dimensions must be positive"));
        }
        if !(self.lh_min > 0.0 && self.lh_min <= self.lh_max) {
            return Err(ParamError("need 0 < lh_min <= lh_max"));
        }
        if self.lh_max > self.r0 * 1.05 {
            return Err(ParamError("lh_max must not exceed 1.05 * r0"));
        }
        if !(self.th1_min < self.th1_max && self.th2_min < self.th2_max) {
            return Err(ParamError("angle limits must be ordered"));
        }
        Ok(())
    }

    /// Same parameters with a different spring stiffness. Library entries
    /// carry their own k, so integration routines use this to evaluate an
    /// entry against the shared parameter set.
    pub fn with_k(mut self, k: f64) -> Self {
        self.k = k;
        self
    }

    /// Gravity as a vector.
    pub fn gravity(&self) -> nalgebra::Vector3<f64> {
        nalgebra::Vector3::new(0.0, 0.0, -self.g)
    }
}

/// Stance-phase PD gains of the actively controlled point mass.
#[derive(Debug, Clone, PartialEq)]
pub struct PdGains {
    pub kp: Matrix3<f64>,
    pub kd: Matrix3<f64>,
}

impl PdGains {
    /// Critically damped isotropic gains: Kp = m w^2 I, Kd = 2 m w I.
    pub fn critically_damped(m: f64, omega: f64) -> Self {
        Self {
            kp: Matrix3::identity() * (m * omega * omega),
            kd: Matrix3::identity() * (2.0 * m * omega),
        }
    }

    /// Default closed-loop bandwidth: 20 rad/s, well inside one stance phase.
    pub fn default_for(m: f64) -> Self {
        Self::critically_damped(m, 20.0)
    }

    /// True when both matrices are symmetric positive definite.
    pub fn is_spd(&self) -> bool {
        fn spd(m: &Matrix3<f64>) -> bool {
            let sym = (m - m.transpose()).norm() < 1e-9 * m.norm().max(1.0);
            sym && m.symmetric_eigenvalues().iter().all(|&e| e > 0.0)
        }
        spd(&self.kp) && spd(&self.kd)
    }
}
