//! The actively controlled point-mass-with-foot model: PD force control
//! toward a passive spring-mass reference, projected onto the feasible
//! force cone, and the resulting apex-to-apex return map.
//!
//! The active model has no spring. During stance the controller computes a
//! desired force from the tracking error against the undisturbed periodic
//! trajectory, projects it onto the polyhedral cone of the foot, and the
//! point mass integrates under the projected force. Control runs at 1 kHz
//! with a zero-order hold; physics substeps at 10 kHz.

use nalgebra::Vector3;

use crate::cone::{project_force, ForceCone};
use crate::dynamics::{
    flight_to_touchdown, foot_kinematics, passive_stance_sampled, MAX_PHASE_TIME,
};
use crate::error::SimError;
use crate::library::TrajectoryEntry;
use crate::params::{PdGains, TemplateParams};
use crate::state::{
    ApexState, ComState, EventKind, HybridTrace, LegCommand, Phase, PhaseEvent, Side, TraceSample,
};

/// Control period of the stance force loop [s].
pub const CONTROL_DT: f64 = 1e-3;
/// Physics substep under the zero-order force hold [s].
pub const PHYSICS_DT: f64 = 1e-4;

/// One reference point: CoM position relative to the touchdown foot, plus
/// velocity and total acceleration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefPoint {
    pub p_rel: Vector3<f64>,
    pub v: Vector3<f64>,
    pub a: Vector3<f64>,
}

/// The sampled CoM evolution of one undisturbed periodic stance phase,
/// anchored at its touchdown foot point. Positions are stored relative to
/// the anchor so the reference can be shifted to any realized foothold.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTrajectory {
    times: Vec<f64>,
    points: Vec<RefPoint>,
    /// Stance duration of the generating passive trajectory [s].
    pub duration: f64,
    /// CoM velocity at the generating touchdown.
    pub td_velocity: Vector3<f64>,
}

impl ReferenceTrajectory {
    /// Builds the reference for a library entry by integrating the entry's
    /// undisturbed stance phase.
    pub fn for_entry(
        params: &TemplateParams,
        entry: &TrajectoryEntry,
    ) -> Result<Self, SimError> {
        let p = params.with_k(entry.k);
        let out = crate::dynamics::apex_step(
            &p,
            &entry.apex(),
            &entry.command(params.r0),
            0.0,
            None,
        )?;
        let anchor = out.foot;
        let mut times = Vec::new();
        let mut points = Vec::new();
        passive_stance_sampled(&p, &out.touchdown, &anchor, 0.0, |t, pos, vel, acc| {
            times.push(t);
            points.push(RefPoint {
                p_rel: pos - anchor,
                v: *vel,
                a: *acc,
            });
        })?;
        let duration = *times.last().unwrap_or(&0.0);
        Ok(Self {
            times,
            points,
            duration,
            td_velocity: out.touchdown.v,
        })
    }

    /// Reference point at stance time `t`, clamped to the sampled range and
    /// linearly interpolated between nodes.
    pub fn sample(&self, t: f64) -> RefPoint {
        let n = self.times.len();
        if n == 0 {
            return RefPoint {
                p_rel: Vector3::zeros(),
                v: Vector3::zeros(),
                a: Vector3::zeros(),
            };
        }
        if t <= self.times[0] {
            return self.points[0];
        }
        if t >= self.times[n - 1] {
            return self.points[n - 1];
        }
        let idx = self.times.partition_point(|&x| x < t).min(n - 1);
        let (i0, i1) = (idx - 1, idx);
        let span = self.times[i1] - self.times[i0];
        if span <= 0.0 {
            return self.points[i1];
        }
        let w = (t - self.times[i0]) / span;
        let a = &self.points[i0];
        let b = &self.points[i1];
        RefPoint {
            p_rel: a.p_rel + (b.p_rel - a.p_rel) * w,
            v: a.v + (b.v - a.v) * w,
            a: a.a + (b.a - a.a) * w,
        }
    }

    /// The same stance mirrored through the sagittal plane, for the other
    /// stance side.
    pub fn mirrored(&self) -> Self {
        let flip = |v: &Vector3<f64>| Vector3::new(v.x, -v.y, v.z);
        Self {
            times: self.times.clone(),
            points: self
                .points
                .iter()
                .map(|pt| RefPoint {
                    p_rel: flip(&pt.p_rel),
                    v: flip(&pt.v),
                    a: flip(&pt.a),
                })
                .collect(),
            duration: self.duration,
            td_velocity: flip(&self.td_velocity),
        }
    }

    /// Oriented for a stance side: identity for the canonical side, mirror
    /// for the other.
    pub fn for_side(&self, side: Side) -> Self {
        match side {
            Side::PlusY => self.clone(),
            Side::MinusY => self.mirrored(),
        }
    }

    /// The reference rotated into a new running direction.
    pub fn rotated(&self, r: &nalgebra::Matrix3<f64>) -> Self {
        Self {
            times: self.times.clone(),
            points: self
                .points
                .iter()
                .map(|pt| RefPoint {
                    p_rel: r * pt.p_rel,
                    v: r * pt.v,
                    a: r * pt.a,
                })
                .collect(),
            duration: self.duration,
            td_velocity: r * self.td_velocity,
        }
    }
}

/// PD tracking force with gravity compensation:
/// `fd = m a_ref - m g_vec + Kd (v_ref - v) + Kp (p_ref - p)`.
pub fn desired_force(
    m: f64,
    g: f64,
    reference: &RefPoint,
    p_ref_world: &Vector3<f64>,
    actual_p: &Vector3<f64>,
    actual_v: &Vector3<f64>,
    gains: &PdGains,
) -> Vector3<f64> {
    let g_vec = Vector3::new(0.0, 0.0, -g);
    reference.a * m - g_vec * m + gains.kd * (reference.v - actual_v)
        + gains.kp * (p_ref_world - actual_p)
}

/// Measurement and actuation hooks of the stance loop; the identity
/// implementation is the ideal noise-free plant.
pub trait StanceHooks {
    /// Measured CoM state fed to the controller at a control tick.
    fn measure(
        &mut self,
        tick: usize,
        p: &Vector3<f64>,
        v: &Vector3<f64>,
    ) -> (Vector3<f64>, Vector3<f64>) {
        (*p, *v)
    }

    /// Force actually applied by the plant for a commanded force.
    fn actuate(&mut self, tick: usize, f: &Vector3<f64>) -> Vector3<f64> {
        *f
    }

    /// Mass the controller believes in.
    fn controller_mass(&self, m: f64) -> f64 {
        m
    }
}

/// The ideal plant: exact measurements, exact actuation, exact mass.
pub struct IdealHooks;

impl StanceHooks for IdealHooks {}

/// Result of one actively controlled stance phase.
#[derive(Debug, Clone)]
pub struct StanceOutcome {
    pub liftoff: ComState,
    pub trace: HybridTrace,
    pub control_ticks: usize,
    pub projected_ticks: usize,
}

/// Simulates the actively controlled stance from a touchdown state with the
/// foot pinned at `pf`, tracking `reference` re-anchored there, until the
/// leg extends through rest length.
pub fn simulate_active_stance(
    params: &TemplateParams,
    reference: &ReferenceTrajectory,
    init: &ComState,
    pf: &Vector3<f64>,
    gains: &PdGains,
    hooks: &mut dyn StanceHooks,
) -> Result<StanceOutcome, SimError> {
    let mut trace = HybridTrace::default();
    let mut p = init.p;
    let mut v = init.v;
    let ground_z = pf.z;
    let m_ctrl = hooks.controller_mass(params.m);
    let mut projected_ticks = 0usize;
    let mut tick = 0usize;
    let mut armed = (p - pf).norm() < params.r0 - 1e-9;

    loop {
        let tau = tick as f64 * CONTROL_DT;
        if tau > MAX_PHASE_TIME {
            return Err(if armed {
                SimError::StuckInStance(MAX_PHASE_TIME)
            } else {
                SimError::StanceNeverEngaged
            });
        }

        let (p_meas, v_meas) = hooks.measure(tick, &p, &v);
        // Feedback compares states at the tick time; the feedforward
        // acceleration is sampled mid-tick to cancel the first-order lag of
        // the zero-order force hold.
        let mut ref_point = reference.sample(tau);
        ref_point.a = reference.sample(tau + 0.5 * CONTROL_DT).a;
        let p_ref_world = pf + ref_point.p_rel;
        let fd = desired_force(m_ctrl, params.g, &ref_point, &p_ref_world, &p_meas, &v_meas, gains);
        let cone = ForceCone::new(params, &p_meas, pf)?;
        let projected = project_force(&fd, &cone);
        if projected.was_projected {
            projected_ticks += 1;
        }
        let f_applied = hooks.actuate(tick, &projected.f);

        trace.push(TraceSample {
            t: init.t + tau,
            phase: Phase::Stance,
            p,
            v,
            foot: *pf,
            force: f_applied,
        });

        // Physics substeps under the held force.
        let accel = params.gravity() + f_applied / params.m;
        let sub = (CONTROL_DT / PHYSICS_DT).round() as usize;
        for sub_idx in 0..sub {
            let (p_next, v_next) = constant_accel_step(&p, &v, &accel, PHYSICS_DT);
            let len_next = (p_next - pf).norm();
            if armed && len_next >= params.r0 {
                let (p_lo, v_lo, dt_lo) =
                    bisect_rest_length(&p, &v, &accel, pf, params.r0, PHYSICS_DT);
                let t_lo = init.t + tau + sub_idx as f64 * PHYSICS_DT + dt_lo;
                let lo = ComState::new(p_lo, v_lo, t_lo);
                trace.push(TraceSample {
                    t: t_lo,
                    phase: Phase::Stance,
                    p: p_lo,
                    v: v_lo,
                    foot: *pf,
                    force: f_applied,
                });
                return Ok(StanceOutcome {
                    liftoff: lo,
                    trace,
                    control_ticks: tick + 1,
                    projected_ticks,
                });
            }
            if len_next < params.r0 - 1e-9 {
                armed = true;
            }
            p = p_next;
            v = v_next;
            if p.z - ground_z <= 0.0 {
                return Err(SimError::Crashed(init.t + tau));
            }
        }
        tick += 1;
    }
}

/// Exact ballistic step under a constant acceleration.
fn constant_accel_step(
    p: &Vector3<f64>,
    v: &Vector3<f64>,
    a: &Vector3<f64>,
    dt: f64,
) -> (Vector3<f64>, Vector3<f64>) {
    (p + v * dt + a * (0.5 * dt * dt), v + a * dt)
}

/// Bisects the rest-length crossing inside one constant-force substep.
fn bisect_rest_length(
    p: &Vector3<f64>,
    v: &Vector3<f64>,
    a: &Vector3<f64>,
    pf: &Vector3<f64>,
    r0: f64,
    dt_full: f64,
) -> (Vector3<f64>, Vector3<f64>, f64) {
    let mut lo = 0.0;
    let mut hi = dt_full;
    let mut out = constant_accel_step(p, v, a, dt_full);
    while hi - lo > crate::dynamics::EVENT_TIME_TOL {
        let mid = 0.5 * (lo + hi);
        let s = constant_accel_step(p, v, a, mid);
        if (s.0 - pf).norm() >= r0 {
            hi = mid;
            out = s;
        } else {
            lo = mid;
        }
    }
    (out.0, out.1, hi)
}

/// Outcome of one active apex-to-apex step.
#[derive(Debug, Clone)]
pub struct ActiveStepOutcome {
    pub apex: ApexState,
    pub touchdown: ComState,
    pub foot: Vector3<f64>,
    pub liftoff: ComState,
    pub trace: HybridTrace,
    pub control_ticks: usize,
    pub projected_ticks: usize,
}

/// The actively controlled apex-to-apex return map: ballistic flight with
/// the leg held by `u`, active stance tracking the entry reference
/// re-anchored at the realized foothold, and flight to the next apex.
///
/// A command whose foot already penetrates the ground at the apex pins the
/// foot immediately at ground level (the early strike of an unobserved
/// surface), so perturbed return maps stay well defined around grazing
/// trajectories.
pub fn active_apex_step(
    params: &TemplateParams,
    gains: &PdGains,
    x: &ApexState,
    u: &LegCommand,
    reference: &ReferenceTrajectory,
    ground_z: f64,
    hooks: &mut dyn StanceHooks,
) -> Result<ActiveStepOutcome, SimError> {
    let start = ComState::new(
        Vector3::new(0.0, 0.0, ground_z + x.h),
        Vector3::new(x.vx, x.vy, 0.0),
        0.0,
    );

    let commanded_foot = foot_kinematics(&start.p, u, params.yh);
    let (td, pf) = if commanded_foot.z <= ground_z {
        // Early strike: pin at ground level under the commanded (x, y).
        (
            start,
            Vector3::new(commanded_foot.x, commanded_foot.y, ground_z),
        )
    } else {
        flight_to_touchdown(params, &start, u, ground_z)?
    };

    let oriented = reference.for_side(u.sigma);
    let stance = simulate_active_stance(params, &oriented, &td, &pf, gains, hooks)?;

    // Ballistic flight to the apex.
    let lo = stance.liftoff;
    let apex_state = if lo.v.z <= 0.0 {
        lo
    } else {
        let t_rise = lo.v.z / params.g;
        let p_apex = lo.p
            + Vector3::new(
                lo.v.x * t_rise,
                lo.v.y * t_rise,
                0.5 * lo.v.z * t_rise,
            );
        ComState::new(p_apex, Vector3::new(lo.v.x, lo.v.y, 0.0), lo.t + t_rise)
    };

    let mut trace = stance.trace;
    trace.events = vec![
        PhaseEvent {
            kind: EventKind::Touchdown,
            state: td,
            foot: pf,
        },
        PhaseEvent {
            kind: EventKind::Liftoff,
            state: lo,
            foot: pf,
        },
        PhaseEvent {
            kind: EventKind::Apex,
            state: apex_state,
            foot: foot_kinematics(&apex_state.p, u, params.yh),
        },
    ];

    Ok(ActiveStepOutcome {
        apex: ApexState::new(apex_state.v.x, apex_state.v.y, apex_state.p.z - ground_z),
        touchdown: td,
        foot: pf,
        liftoff: lo,
        trace,
        control_ticks: stance.control_ticks,
        projected_ticks: stance.projected_ticks,
    })
}

/// The active return map reduced to the next apex state.
pub fn active_return_map(
    params: &TemplateParams,
    gains: &PdGains,
    x: &ApexState,
    u: &LegCommand,
    reference: &ReferenceTrajectory,
    ground_z: f64,
) -> Result<ApexState, SimError> {
    Ok(active_apex_step(params, gains, x, u, reference, ground_z, &mut IdealHooks)?.apex)
}

/// Normalized RMS deviation between the active stance force profile and the
/// passive spring force of the generating reference, sampled at the control
/// rate over the common duration.
pub fn force_profile_nrmse(
    params: &TemplateParams,
    reference: &ReferenceTrajectory,
    trace: &HybridTrace,
) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    let mut count = 0usize;
    let t0 = trace.samples.first().map_or(0.0, |s| s.t);
    for s in trace.samples.iter().filter(|s| s.phase == Phase::Stance) {
        let tau = s.t - t0;
        if tau > reference.duration {
            break;
        }
        let r = reference.sample(tau);
        let f_passive = (r.a - params.gravity()) * params.m;
        num += (s.force - f_passive).norm_squared();
        den += f_passive.norm_squared();
        count += 1;
    }
    if count == 0 || den <= 0.0 {
        return f64::INFINITY;
    }
    (num / den).sqrt()
}
