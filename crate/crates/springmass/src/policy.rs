//! Trajectory selection policies for step adaptation: jumping over
//! obstacles and running across stepping stones, each with a touchdown
//! variant (re-planning for the step that just started) and a liftoff
//! variant (committing the leg command for the flight that just began),
//! plus the heading-change transform and the back-integration
//! construction used as a reachability oracle.
//!
//! Each policy filters the library in stages (feasibility, kinematics,
//! clearance, displacement windows) and picks the surviving entry with the
//! best convergence score. Stage survivor counts are reported for
//! diagnostics, and an emptied stage is an explicit error naming the stage.

use nalgebra::{Matrix3, Vector2, Vector3};

use crate::active::ReferenceTrajectory;
use crate::deadbeat::{deadbeat_command_for_side, GainLibrary};
use crate::dynamics::{
    back_ballistic_to_pin, back_flight_to_liftoff, back_stance_to_rest_length, flight_times,
    leg_offset,
};
pub use crate::dynamics::predict_apex;
use crate::error::{PolicyError, SimError};
use crate::library::{
    liftoff_step_displacement, nominal_step_displacement, TrajectoryEntry, TrajectoryLibrary,
};
use crate::params::TemplateParams;
use crate::state::{ApexState, ComState, LegCommand, Side};

/// An obstacle in the sagittal path: the far edge is `d1x` ahead of the
/// back of the current foot and the box is `d1z` tall.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Obstacle {
    pub d1x: f64,
    pub d1z: f64,
}

/// A rectangular foothold region: centre offset from the current foothold,
/// with `length` the lateral (y) extent and `width` the longitudinal (x)
/// extent of the relaxation window.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SteppingStone {
    pub offset: Vector3<f64>,
    pub length: f64,
    pub width: f64,
}

impl SteppingStone {
    pub fn new(offset: Vector3<f64>, length: f64, width: f64) -> Self {
        Self {
            offset,
            length,
            width,
        }
    }

    /// True when a displacement from the reference foothold lands inside
    /// the stone window.
    pub fn admits(&self, dx: f64, dy: f64) -> bool {
        (dx - self.offset.x).abs() <= self.width / 2.0
            && (dy - self.offset.y).abs() <= self.length / 2.0
    }
}

/// The outcome of one policy query.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    /// Index of the selected library entry.
    pub index: usize,
    /// Deadbeat-adjusted leg command for the selected entry.
    pub u_new: LegCommand,
    /// Predicted absolute foothold of the adapted step.
    pub foothold: Vector3<f64>,
    /// Convergence score of the winner (policy-specific norm).
    pub score: f64,
    /// Survivor count after each filter stage, in execution order.
    pub stages: Vec<(&'static str, usize)>,
}

/// Shared read-only policy inputs.
#[derive(Clone, Copy)]
pub struct PolicyContext<'a> {
    pub lib: &'a TrajectoryLibrary,
    pub gains: &'a GainLibrary,
    pub params: &'a TemplateParams,
}

/// The state a liftoff-policy query runs from.
#[derive(Debug, Clone, Copy)]
pub struct LiftoffContext {
    /// CoM state at (or just after) liftoff.
    pub com: ComState,
    /// Current foothold (the stance that just ended).
    pub pf: Vector3<f64>,
    /// Side of the upcoming stance.
    pub next_side: Side,
}

fn canonical_apex(x: &ApexState, side: Side) -> ApexState {
    match side {
        Side::PlusY => *x,
        Side::MinusY => x.mirrored(),
    }
}

/// Lateral displacement in world coordinates for a stance on `side`, from
/// the canonical (PlusY) value.
fn world_dfy(dfy_canonical: f64, side: Side) -> f64 {
    dfy_canonical * side.sign()
}

/// Foot height above ground at the apex of an entry's nominal trajectory.
fn entry_apex_clearance(entry: &TrajectoryEntry, params: &TemplateParams) -> f64 {
    entry.h_apex - params.r0 * entry.th1.cos() * entry.th2.cos()
}

/// Foot height above the takeoff surface at a predicted apex under an
/// adjusted command.
fn command_apex_clearance(h_apex: f64, u: &LegCommand) -> f64 {
    h_apex - u.lh * u.th1.cos() * u.th2.cos()
}

fn within_limits(u: &LegCommand, p: &TemplateParams) -> bool {
    u.lh > p.lh_min
        && u.lh < p.lh_max
        && u.th1 > p.th1_min
        && u.th1 < p.th1_max
        && u.th2 > p.th2_min
        && u.th2 < p.th2_max
}

struct StageTracker {
    stages: Vec<(&'static str, usize)>,
}

impl StageTracker {
    fn new() -> Self {
        Self { stages: Vec::new() }
    }

    fn record<T>(
        &mut self,
        stage: &'static str,
        survivors: Vec<T>,
    ) -> Result<Vec<T>, PolicyError> {
        self.stages.push((stage, survivors.len()));
        if survivors.is_empty() {
            Err(PolicyError::NoFeasibleTrajectory {
                stage,
                counts: self.stages.clone(),
            })
        } else {
            Ok(survivors)
        }
    }
}

/// Touchdown score: how close the committed touchdown command is to the
/// deadbeat command of each candidate (the convergence-possibility measure
/// of the touchdown policies).
fn touchdown_score(
    entry: &TrajectoryEntry,
    gain: &Matrix3<f64>,
    x_c: &ApexState,
    u_td: &LegCommand,
    r0: f64,
) -> f64 {
    let u_hat = entry.command(r0).as_vector() + gain * (x_c.as_vector() - entry.apex().as_vector());
    (u_td.as_vector() - u_hat).norm()
}

fn argmin<T>(cands: Vec<(usize, T, f64)>) -> (usize, T, f64) {
    let mut best: Option<(usize, T, f64)> = None;
    for c in cands {
        match &best {
            Some((_, _, s)) if c.2 >= *s => {}
            _ => best = Some(c),
        }
    }
    best.expect("argmin over a non-empty candidate set")
}

/// Obstacle touchdown policy: runs right after a touchdown when an obstacle
/// is ahead, picking the stance reference whose deadbeat command best
/// matches the already committed touchdown.
///
/// `x_td` is the apex state of the flight that just ended (heights above
/// the current ground) and `u_td` the command it landed with.
pub fn select_obstacle_touchdown(
    ctx: &PolicyContext<'_>,
    obs: &Obstacle,
    x_td: &ApexState,
    u_td: &LegCommand,
    pf_current: &Vector3<f64>,
) -> Result<SelectionResult, PolicyError> {
    let side = u_td.sigma;
    let x_c = canonical_apex(x_td, side);
    let mut tracker = StageTracker::new();

    let cands: Vec<usize> = (0..ctx.lib.entries.len())
        .filter(|&i| ctx.gains.gain(i).is_some())
        .collect();
    let cands = tracker.record("gain", cands)?;

    let cands: Vec<usize> = cands
        .into_iter()
        .filter(|&i| obs.d1z < entry_apex_clearance(&ctx.lib.entries[i], ctx.params))
        .collect();
    let cands = tracker.record("clearance", cands)?;

    let mut with_disp = Vec::new();
    for i in cands {
        if let Ok((dfx, dfy)) = nominal_step_displacement(&ctx.lib.entries[i], ctx.params, 0.0) {
            if obs.d1x < dfx {
                with_disp.push((i, Vector2::new(dfx, world_dfy(dfy, side))));
            }
        }
    }
    let cands = tracker.record("reach", with_disp)?;

    let scored: Vec<(usize, Vector2<f64>, f64)> = cands
        .into_iter()
        .map(|(i, d)| {
            let gain = &ctx.gains.gain(i).expect("filtered").k;
            let s = touchdown_score(&ctx.lib.entries[i], gain, &x_c, u_td, ctx.params.r0);
            (i, d, s)
        })
        .collect();
    let (index, disp, score) = argmin(scored);

    let gain = &ctx.gains.gain(index).expect("filtered").k;
    let u_new = deadbeat_command_for_side(&ctx.lib.entries[index], gain, x_td, side, ctx.params.r0);
    Ok(SelectionResult {
        index,
        u_new,
        foothold: pf_current + Vector3::new(disp.x, disp.y, 0.0),
        score,
        stages: tracker.stages,
    })
}

/// Obstacle liftoff policy: runs at liftoff, committing the deadbeat leg
/// command for the flight that must clear the obstacle.
pub fn select_obstacle_liftoff(
    ctx: &PolicyContext<'_>,
    obs: &Obstacle,
    lo: &LiftoffContext,
) -> Result<SelectionResult, PolicyError> {
    let side = lo.next_side;
    let apex = predict_apex(&lo.com, ctx.params.g);
    let h_takeoff = apex.h - lo.pf.z;
    let x_pred = ApexState::new(apex.vx, apex.vy, h_takeoff);
    let x_c = canonical_apex(&x_pred, side);
    let mut tracker = StageTracker::new();

    let cands: Vec<usize> = (0..ctx.lib.entries.len())
        .filter(|&i| ctx.gains.gain(i).is_some())
        .collect();
    let cands = tracker.record("gain", cands)?;

    // Deadbeat-adjusted commands for every candidate.
    let with_u: Vec<(usize, LegCommand)> = cands
        .into_iter()
        .map(|i| {
            let gain = &ctx.gains.gain(i).expect("filtered").k;
            (
                i,
                deadbeat_command_for_side(&ctx.lib.entries[i], gain, &x_pred, side, ctx.params.r0),
            )
        })
        .collect();
    let cands = tracker.record("deadbeat", with_u)?;

    let cands: Vec<(usize, LegCommand)> = cands
        .into_iter()
        .filter(|(_, u)| within_limits(u, ctx.params))
        .collect();
    let cands = tracker.record("kinematic", cands)?;

    let cands: Vec<(usize, LegCommand)> = cands
        .into_iter()
        .filter(|(_, u)| obs.d1z < command_apex_clearance(h_takeoff, u))
        .collect();
    let cands = tracker.record("clearance", cands)?;

    let mut with_disp = Vec::new();
    for (i, u) in cands {
        if let Ok((dfx, dfy)) =
            liftoff_step_displacement(&lo.com, &lo.pf, &u, ctx.params, 0.0)
        {
            if obs.d1x < dfx {
                with_disp.push((i, (u, Vector2::new(dfx, dfy))));
            }
        }
    }
    let cands = tracker.record("reach", with_disp)?;

    let scored: Vec<(usize, (LegCommand, Vector2<f64>), f64)> = cands
        .into_iter()
        .map(|(i, payload)| {
            let s = (x_c.as_vector() - ctx.lib.entries[i].apex().as_vector()).norm();
            (i, payload, s)
        })
        .collect();
    let (index, (u_new, disp), score) = argmin(scored);

    Ok(SelectionResult {
        index,
        u_new,
        foothold: lo.pf + Vector3::new(disp.x, disp.y, 0.0),
        score,
        stages: tracker.stages,
    })
}

/// Stepping-stone touchdown policy: re-plans the running stance so the
/// next step lands inside `stone1` (centre offset measured from the
/// current foothold).
pub fn select_stones_touchdown(
    ctx: &PolicyContext<'_>,
    stone1: &SteppingStone,
    x_td: &ApexState,
    u_td: &LegCommand,
    pf_current: &Vector3<f64>,
) -> Result<SelectionResult, PolicyError> {
    let side = u_td.sigma;
    let x_c = canonical_apex(x_td, side);
    let dz = stone1.offset.z;
    let mut tracker = StageTracker::new();

    let cands: Vec<usize> = (0..ctx.lib.entries.len())
        .filter(|&i| ctx.gains.gain(i).is_some())
        .collect();
    let cands = tracker.record("gain", cands)?;

    let cands: Vec<usize> = cands
        .into_iter()
        .filter(|&i| dz < entry_apex_clearance(&ctx.lib.entries[i], ctx.params))
        .collect();
    let cands = tracker.record("clearance", cands)?;

    let mut in_window = Vec::new();
    for i in cands {
        if let Ok((dfx, dfy)) = nominal_step_displacement(&ctx.lib.entries[i], ctx.params, dz) {
            let dfy_w = world_dfy(dfy, side);
            if stone1.admits(dfx, dfy_w) {
                in_window.push((i, Vector2::new(dfx, dfy_w)));
            }
        }
    }
    let cands = tracker.record("window", in_window)?;

    let scored: Vec<(usize, Vector2<f64>, f64)> = cands
        .into_iter()
        .map(|(i, d)| {
            let gain = &ctx.gains.gain(i).expect("filtered").k;
            let s = touchdown_score(&ctx.lib.entries[i], gain, &x_c, u_td, ctx.params.r0);
            (i, d, s)
        })
        .collect();
    let (index, disp, score) = argmin(scored);

    let gain = &ctx.gains.gain(index).expect("filtered").k;
    let u_new = deadbeat_command_for_side(&ctx.lib.entries[index], gain, x_td, side, ctx.params.r0);
    Ok(SelectionResult {
        index,
        u_new,
        foothold: pf_current + Vector3::new(disp.x, disp.y, dz),
        score,
        stages: tracker.stages,
    })
}

/// Stepping-stone liftoff policy: commits a deadbeat command that lands
/// anywhere inside `stone1` while full convergence on the selected
/// trajectory would reach `stone2` on the following step. Both stone
/// offsets are measured from the current foothold.
pub fn select_stones_liftoff(
    ctx: &PolicyContext<'_>,
    stone1: &SteppingStone,
    stone2: &SteppingStone,
    lo: &LiftoffContext,
) -> Result<SelectionResult, PolicyError> {
    let side = lo.next_side;
    let apex = predict_apex(&lo.com, ctx.params.g);
    let h_takeoff = apex.h - lo.pf.z;
    let dz1 = stone1.offset.z;
    let dz2 = stone2.offset.z - stone1.offset.z;
    // Apex height relative to the surface the flight lands on.
    let x_pred = ApexState::new(apex.vx, apex.vy, h_takeoff - dz1);
    let x_c = canonical_apex(&x_pred, side);
    let mut tracker = StageTracker::new();

    let cands: Vec<usize> = (0..ctx.lib.entries.len())
        .filter(|&i| ctx.gains.gain(i).is_some())
        .collect();
    let cands = tracker.record("gain", cands)?;

    let with_u: Vec<(usize, LegCommand)> = cands
        .into_iter()
        .map(|i| {
            let gain = &ctx.gains.gain(i).expect("filtered").k;
            (
                i,
                deadbeat_command_for_side(
                    &ctx.lib.entries[i],
                    gain,
                    &ApexState::new(apex.vx, apex.vy, h_takeoff - dz1),
                    side,
                    ctx.params.r0,
                ),
            )
        })
        .collect();
    let cands = tracker.record("deadbeat", with_u)?;

    let cands: Vec<(usize, LegCommand)> = cands
        .into_iter()
        .filter(|(_, u)| within_limits(u, ctx.params))
        .collect();
    let cands = tracker.record("kinematic", cands)?;

    let cands: Vec<(usize, LegCommand)> = cands
        .into_iter()
        .filter(|(_, u)| dz1 < command_apex_clearance(h_takeoff, u))
        .collect();
    let cands = tracker.record("clearance", cands)?;

    let mut in_window = Vec::new();
    for (i, u) in cands {
        if let Ok((dfx, dfy)) = liftoff_step_displacement(&lo.com, &lo.pf, &u, ctx.params, dz1) {
            if stone1.admits(dfx, dfy) {
                in_window.push((i, (u, Vector2::new(dfx, dfy))));
            }
        }
    }
    let cands = tracker.record("window", in_window)?;

    // Two-ahead filtering under full convergence on each candidate.
    let cands: Vec<(usize, (LegCommand, Vector2<f64>))> = cands
        .into_iter()
        .filter(|(i, _)| dz2 < entry_apex_clearance(&ctx.lib.entries[*i], ctx.params))
        .collect();
    let cands = tracker.record("clearance2", cands)?;

    let mut in_window2 = Vec::new();
    for (i, (u, d1)) in cands {
        // Landing anywhere inside stone1 shifts the remaining target: the
        // second step must cover what is left toward stone2's centre.
        let target2 = Vector2::new(stone2.offset.x - d1.x, stone2.offset.y - d1.y);
        if let Ok((dfx2, dfy2)) = nominal_step_displacement(&ctx.lib.entries[i], ctx.params, dz2) {
            let dfy2_w = world_dfy(dfy2, side);
            if (dfx2 - target2.x).abs() <= stone2.width / 2.0
                && (dfy2_w - target2.y).abs() <= stone2.length / 2.0
            {
                in_window2.push((i, (u, d1)));
            }
        }
    }
    let cands = tracker.record("window2", in_window2)?;

    let scored: Vec<(usize, (LegCommand, Vector2<f64>), f64)> = cands
        .into_iter()
        .map(|(i, payload)| {
            let s = (x_c.as_vector() - ctx.lib.entries[i].apex().as_vector()).norm();
            (i, payload, s)
        })
        .collect();
    let (index, (u_new, d1), score) = argmin(scored);

    Ok(SelectionResult {
        index,
        u_new,
        foothold: lo.pf + Vector3::new(d1.x, d1.y, dz1),
        score,
        stages: tracker.stages,
    })
}

/// Validates that `rh` is a proper rotation about the z axis.
fn check_yaw_rotation(rh: &Matrix3<f64>) -> Result<(), PolicyError> {
    let orthonormal = (rh.transpose() * rh - Matrix3::identity()).norm() < 1e-9;
    let proper = (rh.determinant() - 1.0).abs() < 1e-9;
    let about_z = (rh * Vector3::z() - Vector3::z()).norm() < 1e-9;
    if orthonormal && proper && about_z {
        Ok(())
    } else {
        Err(PolicyError::NotARotation)
    }
}

/// Heading-change transform: the stance reference is rotated into the new
/// running direction and the apex error for the deadbeat controller is the
/// world state expressed back in the heading frame minus the periodic
/// state.
pub fn heading_transform(
    rh: &Matrix3<f64>,
    refs: &ReferenceTrajectory,
    x_world: &ApexState,
    x_star: &ApexState,
) -> Result<(ReferenceTrajectory, Vector3<f64>), PolicyError> {
    check_yaw_rotation(rh)?;
    let rotated = refs.rotated(rh);
    let v_world = Vector3::new(x_world.vx, x_world.vy, 0.0);
    let v_heading = rh.transpose() * v_world;
    let dx = Vector3::new(
        v_heading.x - x_star.vx,
        v_heading.y - x_star.vy,
        x_world.h - x_star.h,
    );
    Ok((rotated, dx))
}

/// The pre-states recovered by back-integrating an entry's periodic motion
/// from a desired foothold.
#[derive(Debug, Clone)]
pub struct BackIntegration {
    /// Required CoM state at the previous liftoff (time 0 at the target
    /// touchdown, so `t` is negative).
    pub liftoff_prev: ComState,
    /// Required CoM state at the previous foot strike.
    pub touchdown_prev: ComState,
    /// Foothold of the previous stance.
    pub foot_prev: Vector3<f64>,
    /// Duration of the flight onto the target foothold.
    pub flight_duration: f64,
    /// Duration of the previous stance (strike to liftoff).
    pub stance_duration: f64,
}

/// Back-integrates an entry's periodic trajectory from a target foothold:
/// the touchdown state there is pure leg inverse kinematics, the flight is
/// reversed ballistically to the previous liftoff, and the previous stance
/// is reversed through its rest-length and foot-strike events. The states
/// stay on the periodic manifold throughout, so forward integration from
/// the returned liftoff reproduces the target foothold.
pub fn back_integrate_target(
    entry: &TrajectoryEntry,
    pf_target: &Vector3<f64>,
    params: &TemplateParams,
    side: Side,
) -> Result<BackIntegration, PolicyError> {
    let p = params.with_k(entry.k);
    let mut u_star = entry.command(params.r0);
    u_star.sigma = side;

    // Touchdown state at the target foothold: inverse kinematics plus the
    // entry's periodic touchdown velocity.
    let step = crate::library::entry_step(entry, params).map_err(PolicyError::BackIntegration)?;
    let p_td = pf_target - leg_offset(&u_star, params.yh);
    let mut v_td = step.touchdown.v;
    if side == Side::MinusY {
        v_td.y = -v_td.y;
    }
    let td_target = ComState::new(p_td, v_td, 0.0);

    // The previous stance ran on the other side; its displacement leads to
    // the target foothold.
    let prev_side = side.flip();
    let (dfx, dfy) =
        nominal_step_displacement(entry, params, 0.0).map_err(PolicyError::BackIntegration)?;
    let foot_prev = pf_target - Vector3::new(dfx, world_dfy(dfy, prev_side), 0.0);

    let lo_prev = back_flight_to_liftoff(&p, &td_target, &foot_prev)
        .map_err(PolicyError::BackIntegration)?;
    let engaged_prev = back_stance_to_rest_length(&p, &lo_prev, &foot_prev)
        .map_err(PolicyError::BackIntegration)?;
    let mut u_prev = u_star;
    u_prev.sigma = prev_side;
    let td_prev = back_ballistic_to_pin(&p, &engaged_prev, &u_prev, foot_prev.z)
        .map_err(PolicyError::BackIntegration)?;

    // Consistency: the recovered strike must put the previous foot at its
    // foothold.
    let foot_check = crate::dynamics::foot_kinematics(&td_prev.p, &u_prev, params.yh);
    let horizontal_err =
        Vector2::new(foot_check.x - foot_prev.x, foot_check.y - foot_prev.y).norm();
    if horizontal_err > 1e-6 {
        return Err(PolicyError::BackIntegration(SimError::FootNeverLands));
    }

    Ok(BackIntegration {
        liftoff_prev: lo_prev,
        touchdown_prev: td_prev,
        foot_prev,
        flight_duration: -lo_prev.t,
        stance_duration: lo_prev.t - td_prev.t,
    })
}

/// Total nominal flight time of an entry on flat ground.
pub fn entry_flight_time(entry: &TrajectoryEntry, params: &TemplateParams) -> Result<f64, SimError> {
    let (tr, tf) = flight_times(entry.h_apex, &entry.command(params.r0), 0.0, params.g)?;
    Ok(tr + tf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn stone_window_membership() {
        let s = SteppingStone::new(Vector3::new(0.8, -0.4, 0.05), 0.3, 0.3);
        assert!(s.admits(0.8, -0.4));
        assert!(s.admits(0.94, -0.26));
        assert!(!s.admits(0.96, -0.4));
        assert!(!s.admits(0.8, -0.24));
    }

    #[test]
    fn yaw_rotation_validation() {
        let rz = nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), 0.5).into_inner();
        assert!(check_yaw_rotation(&rz).is_ok());
        let rx = nalgebra::Rotation3::from_axis_angle(&Vector3::x_axis(), 0.5).into_inner();
        assert!(check_yaw_rotation(&rx).is_err());
        let scaled = rz * 1.1;
        assert!(check_yaw_rotation(&scaled).is_err());
    }

    #[test]
    fn apex_prediction_closed_form() {
        let s = ComState::new(Vector3::new(0.0, 0.0, 1.0), Vector3::new(1.0, 0.0, 1.0), 0.0);
        let apex = predict_apex(&s, 9.81);
        assert_relative_eq!(apex.h, 1.0509683995922527, epsilon = 1e-15);
        assert_eq!(apex.vx, 1.0);
    }

    #[test]
    fn world_lateral_sign_flips_with_side() {
        assert_eq!(world_dfy(-0.3, Side::PlusY), -0.3);
        assert_eq!(world_dfy(-0.3, Side::MinusY), 0.3);
    }
}
