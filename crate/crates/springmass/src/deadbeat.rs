//! Apex-to-apex deadbeat control: finite-difference Jacobians of the active
//! return map and the gain `K = -Ju^-1 Jx` that offsets the periodic leg
//! states to cancel apex errors in a single step.

use nalgebra::{Matrix3, Vector3};

use crate::active::{active_return_map, ReferenceTrajectory};
use crate::error::GainError;
use crate::library::{TrajectoryEntry, TrajectoryLibrary};
use crate::params::{PdGains, TemplateParams};
use crate::state::{leg_switch_matrix, ApexState, LegCommand, Side};

/// Default apex-state perturbations: velocities [m/s], height [m].
pub fn default_eps_x() -> Vector3<f64> {
    Vector3::new(0.02, 0.02, 0.005)
}

/// Default leg-command perturbations: angles [rad], length [m].
pub fn default_eps_u() -> Vector3<f64> {
    Vector3::new(0.005, 0.005, 0.002)
}

/// Condition-number ceiling for an invertible input Jacobian.
pub const COND_LIMIT: f64 = 1e6;
/// Sanity bound on the gain magnitude.
pub const GAIN_NORM_LIMIT: f64 = 50.0;

/// A deadbeat gain with the conditioning of the input Jacobian it came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeadbeatGain {
    /// Maps apex-state error (dvx, dvy, dh) to leg offsets (dth1, dth2, dlh).
    pub k: Matrix3<f64>,
    pub cond_ju: f64,
}

/// Per-entry gains aligned by index with a trajectory library.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GainLibrary {
    pub gains: Vec<Option<DeadbeatGain>>,
    pub failures: Vec<(usize, String)>,
}

impl GainLibrary {
    pub fn len(&self) -> usize {
        self.gains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gains.is_empty()
    }

    pub fn gain(&self, index: usize) -> Option<&DeadbeatGain> {
        self.gains.get(index).and_then(|g| g.as_ref())
    }
}

fn axis_name(kind: &str, i: usize) -> &'static str {
    match (kind, i) {
        ("x", 0) => "vx",
        ("x", 1) => "vy",
        ("x", 2) => "h",
        ("u", 0) => "th1",
        ("u", 1) => "th2",
        _ => "lh",
    }
}

/// Estimates the apex-to-apex Jacobians of the active return map about the
/// entry's periodic pair by central differences; a perturbation whose run
/// fails is halved up to three times before the whole estimate errors.
pub fn estimate_jacobians(
    entry: &TrajectoryEntry,
    params: &TemplateParams,
    gains: &PdGains,
    reference: &ReferenceTrajectory,
    eps_x: &Vector3<f64>,
    eps_u: &Vector3<f64>,
) -> Result<(Matrix3<f64>, Matrix3<f64>), GainError> {
    let x_star = entry.apex();
    let u_star = entry.command(params.r0);

    let eval = |x: &ApexState, u: &LegCommand| {
        active_return_map(params, gains, x, u, reference, 0.0).map(|a| a.as_vector())
    };

    let mut jx = Matrix3::zeros();
    for i in 0..3 {
        let col = central_column(
            eps_x[i],
            axis_name("x", i),
            |e| {
                let mut hi = x_star.as_vector();
                let mut lo = x_star.as_vector();
                hi[i] += e;
                lo[i] -= e;
                Ok((
                    eval(&ApexState::from_vector(&hi), &u_star)?,
                    eval(&ApexState::from_vector(&lo), &u_star)?,
                ))
            },
        )?;
        jx.set_column(i, &col);
    }

    let mut ju = Matrix3::zeros();
    for i in 0..3 {
        let col = central_column(
            eps_u[i],
            axis_name("u", i),
            |e| {
                let mut hi = u_star.as_vector();
                let mut lo = u_star.as_vector();
                hi[i] += e;
                lo[i] -= e;
                Ok((
                    eval(&x_star, &LegCommand::from_vector(&hi, Side::PlusY))?,
                    eval(&x_star, &LegCommand::from_vector(&lo, Side::PlusY))?,
                ))
            },
        )?;
        ju.set_column(i, &col);
    }

    Ok((jx, ju))
}

fn central_column(
    eps0: f64,
    axis: &'static str,
    mut eval_pair: impl FnMut(f64) -> Result<(Vector3<f64>, Vector3<f64>), crate::error::SimError>,
) -> Result<Vector3<f64>, GainError> {
    let mut eps = eps0;
    let mut last_err = None;
    for attempt in 0..4 {
        match eval_pair(eps) {
            Ok((hi, lo)) => return Ok((hi - lo) / (2.0 * eps)),
            Err(e) => {
                last_err = Some((attempt, e));
                eps *= 0.5;
            }
        }
    }
    let (attempts, source) = last_err.expect("at least one attempt");
    Err(GainError::PerturbationFailed {
        axis,
        attempts: attempts + 1,
        source,
    })
}

/// Condition number from the singular values.
pub fn condition_number(m: &Matrix3<f64>) -> f64 {
    let sv = m.singular_values();
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// The deadbeat gain `K = -Ju^-1 Jx`.
pub fn compute_gain(jx: &Matrix3<f64>, ju: &Matrix3<f64>) -> Result<DeadbeatGain, GainError> {
    let cond = condition_number(ju);
    if !cond.is_finite() || cond >= COND_LIMIT {
        return Err(GainError::NearSingularJu { cond });
    }
    let inv = ju
        .try_inverse()
        .ok_or(GainError::NearSingularJu { cond })?;
    let k = -(inv * jx);
    let norm = k.norm();
    if !norm.is_finite() || norm > GAIN_NORM_LIMIT {
        return Err(GainError::GainOutOfRange {
            norm,
            limit: GAIN_NORM_LIMIT,
        });
    }
    Ok(DeadbeatGain { k, cond_ju: cond })
}

/// The deadbeat leg command for an apex state, in the entry's canonical
/// frame: `u = u* + K (x - x*)`. No clamping; kinematic filtering belongs
/// to the selection policies.
pub fn deadbeat_command(
    entry: &TrajectoryEntry,
    k: &Matrix3<f64>,
    x: &ApexState,
    r0: f64,
) -> LegCommand {
    let du = k * (x.as_vector() - entry.apex().as_vector());
    LegCommand::from_vector(&(entry.command(r0).as_vector() + du), Side::PlusY)
}

/// The deadbeat command for a stance on either side: the apex state is
/// mirrored into the canonical frame, corrected, and the command tagged
/// with the requested side.
pub fn deadbeat_command_for_side(
    entry: &TrajectoryEntry,
    k: &Matrix3<f64>,
    x_world: &ApexState,
    side: Side,
    r0: f64,
) -> LegCommand {
    let canonical = match side {
        Side::PlusY => *x_world,
        Side::MinusY => x_world.mirrored(),
    };
    let mut u = deadbeat_command(entry, k, &canonical, r0);
    u.sigma = side;
    u
}

/// Jacobians and deadbeat gains for a whole library. Failures are recorded
/// per entry index; the build never aborts.
pub fn build_gain_library(
    library: &TrajectoryLibrary,
    params: &TemplateParams,
    gains: &PdGains,
) -> GainLibrary {
    let mut out = GainLibrary::default();
    let eps_x = default_eps_x();
    let eps_u = default_eps_u();
    for (idx, entry) in library.entries.iter().enumerate() {
        let result = ReferenceTrajectory::for_entry(params, entry)
            .map_err(|e| e.to_string())
            .and_then(|reference| {
                estimate_jacobians(entry, params, gains, &reference, &eps_x, &eps_u)
                    .map_err(|e| e.to_string())
            })
            .and_then(|(jx, ju)| compute_gain(&jx, &ju).map_err(|e| e.to_string()));
        match result {
            Ok(gain) => out.gains.push(Some(gain)),
            Err(reason) => {
                out.gains.push(None);
                out.failures.push((idx, reason));
            }
        }
    }
    out
}

/// Apex error of one deadbeat-controlled step from a perturbed apex state,
/// relative to the entry's mirrored fixed point.
pub fn controlled_step_error(
    entry: &TrajectoryEntry,
    params: &TemplateParams,
    gains: &PdGains,
    reference: &ReferenceTrajectory,
    k: &Matrix3<f64>,
    dx: &Vector3<f64>,
) -> Result<f64, crate::error::SimError> {
    let x = ApexState::from_vector(&(entry.apex().as_vector() + dx));
    let u = deadbeat_command(entry, k, &x, params.r0);
    let next = active_return_map(params, gains, &x, &u, reference, 0.0)?;
    let target = leg_switch_matrix() * entry.apex().as_vector();
    Ok((next.as_vector() - target).norm())
}
