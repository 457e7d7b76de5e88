//! Hybrid 3D spring-mass dynamics: stance/flight integration, event
//! detection, foot-point kinematics, and the passive apex-to-apex return map.
//!
//! The stance leg only pushes: while the leg is longer than its rest length
//! the dynamics is ballistic even with the foot pinned, so the spring force
//! is continuous (zero) across the rest-length crossings. Touchdown with a
//! leg length below rest is the one genuine force discontinuity, and every
//! event is located by bisection before integration continues across it.

use nalgebra::Vector3;

use crate::error::SimError;
use crate::params::TemplateParams;
use crate::state::{
    ApexState, ComState, EventKind, HybridTrace, LegCommand, Phase, PhaseEvent, TraceSample,
};

/// Fixed integration step during stance [s].
pub const STANCE_DT: f64 = 1e-4;
/// Fixed integration step during flight [s].
pub const FLIGHT_DT: f64 = 1e-3;
/// Event times are refined by bisection to this window [s].
pub const EVENT_TIME_TOL: f64 = 1e-12;
/// A phase that lasts longer than this has failed [s].
pub const MAX_PHASE_TIME: f64 = 5.0;
/// Leg vectors shorter than this are singular [m].
pub const LEG_SINGULARITY: f64 = 1e-9;

/// Spring-leg CoM acceleration with the foot at `pf`:
/// `(k/m) (r0 - |r|) r_hat + g` with `r = p - pf`.
///
/// This is the raw stance formula; it pulls when the leg is extended past
/// rest length. Regime switching belongs to the integrators.
pub fn stance_accel(
    params: &TemplateParams,
    p: &Vector3<f64>,
    pf: &Vector3<f64>,
) -> Result<Vector3<f64>, SimError> {
    let r = p - pf;
    let len = r.norm();
    if len < LEG_SINGULARITY {
        return Err(SimError::SingularLeg(LEG_SINGULARITY));
    }
    Ok(r * (params.k / params.m * (params.r0 - len) / len) + params.gravity())
}

/// Foot point held by a leg command during flight:
/// `pf = p + (0, sigma*yh, 0) + lh (sin th1 cos th2, sigma sin th2, -cos th1 cos th2)`.
pub fn foot_kinematics(p: &Vector3<f64>, u: &LegCommand, yh: f64) -> Vector3<f64> {
    let s = u.sigma.sign();
    let (s1, c1) = u.th1.sin_cos();
    let (s2, c2) = u.th2.sin_cos();
    Vector3::new(
        p.x + u.lh * s1 * c2,
        p.y + s * yh + u.lh * s * s2,
        p.z - u.lh * c1 * c2,
    )
}

/// Leg offset from CoM to foot for a command (i.e. `pf - p`).
pub fn leg_offset(u: &LegCommand, yh: f64) -> Vector3<f64> {
    foot_kinematics(&Vector3::zeros(), u, yh)
}

/// Rise and fall time of the symmetric ballistic flight arc, from the foot
/// height above ground at the apex: `t_rise = sqrt(2 pf_z_apex / g)` and
/// `t_fall = sqrt(2 (pf_z_apex - delta_z) / g)` for a landing surface
/// `delta_z` above the takeoff surface.
pub fn flight_times(
    h_apex: f64,
    u: &LegCommand,
    delta_z: f64,
    g: f64,
) -> Result<(f64, f64), SimError> {
    let pf_z_apex = h_apex - u.lh * u.th1.cos() * u.th2.cos();
    let rad_rise = 2.0 * pf_z_apex / g;
    let rad_fall = 2.0 * (pf_z_apex - delta_z) / g;
    for rad in [rad_rise, rad_fall] {
        if rad < -1e-12 {
            return Err(SimError::UnreachableHeight(rad));
        }
    }
    Ok((rad_rise.max(0.0).sqrt(), rad_fall.max(0.0).sqrt()))
}

/// Predicted apex of a ballistic flight from `state`. If the vertical
/// velocity is already negative the apex is the current height.
pub fn predict_apex(state: &ComState, g: f64) -> ApexState {
    if state.v.z <= 0.0 {
        return ApexState::new(state.v.x, state.v.y, state.p.z);
    }
    let t_rise = state.v.z / g;
    let h = state.p.z + state.v.z * t_rise - 0.5 * g * t_rise * t_rise;
    ApexState::new(state.v.x, state.v.y, h)
}

#[derive(Debug, Clone, Copy)]
struct Body {
    p: Vector3<f64>,
    v: Vector3<f64>,
    t: f64,
}

impl Body {
    fn com(&self) -> ComState {
        ComState::new(self.p, self.v, self.t)
    }
}

/// One classical RK4 step for `p'' = accel(p)`.
fn rk4_step(accel: &impl Fn(&Vector3<f64>) -> Vector3<f64>, s: &Body, dt: f64) -> Body {
    let k1v = accel(&s.p);
    let k1p = s.v;
    let k2v = accel(&(s.p + k1p * (dt / 2.0)));
    let k2p = s.v + k1v * (dt / 2.0);
    let k3v = accel(&(s.p + k2p * (dt / 2.0)));
    let k3p = s.v + k2v * (dt / 2.0);
    let k4v = accel(&(s.p + k3p * dt));
    let k4p = s.v + k3v * dt;
    Body {
        p: s.p + (k1p + k2p * 2.0 + k3p * 2.0 + k4p) * (dt / 6.0),
        v: s.v + (k1v + k2v * 2.0 + k3v * 2.0 + k4v) * (dt / 6.0),
        t: s.t + dt,
    }
}

/// Bisect the step width until the event function changes sign inside a
/// window of `EVENT_TIME_TOL`, then return the state on the crossed side.
/// `before` must satisfy `event(before) < 0` and the event must hold after
/// the full (possibly negative) step: `event(step(before, dt_full)) >= 0`.
fn bisect_event(
    accel: &impl Fn(&Vector3<f64>) -> Vector3<f64>,
    before: &Body,
    dt_full: f64,
    event: &impl Fn(&Body) -> f64,
) -> Body {
    let sign = if dt_full < 0.0 { -1.0 } else { 1.0 };
    let mut lo = 0.0;
    let mut hi = dt_full.abs();
    let mut at_hi = rk4_step(accel, before, dt_full);
    while hi - lo > EVENT_TIME_TOL {
        let mid = 0.5 * (lo + hi);
        let s = rk4_step(accel, before, sign * mid);
        if event(&s) >= 0.0 {
            hi = mid;
            at_hi = s;
        } else {
            lo = mid;
        }
    }
    at_hi
}

/// Outcome of one passive apex-to-apex step, with the located events.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub apex: ApexState,
    pub touchdown: ComState,
    pub foot: Vector3<f64>,
    pub liftoff: ComState,
    pub apex_event: ComState,
}

struct Recorder<'a> {
    trace: Option<&'a mut HybridTrace>,
}

impl Recorder<'_> {
    fn sample(&mut self, s: &Body, phase: Phase, foot: Vector3<f64>, force: Vector3<f64>) {
        if let Some(tr) = self.trace.as_deref_mut() {
            tr.push(TraceSample {
                t: s.t,
                phase,
                p: s.p,
                v: s.v,
                foot,
                force,
            });
        }
    }

    fn event(&mut self, kind: EventKind, s: &Body, foot: Vector3<f64>) {
        if let Some(tr) = self.trace.as_deref_mut() {
            tr.events.push(PhaseEvent {
                kind,
                state: s.com(),
                foot,
            });
        }
    }
}

/// The passive apex-to-apex return map with full trace recording.
///
/// Flight descends from the apex with the foot held by the command until the
/// foot meets the ground, stance runs until the leg extends back through its
/// rest length, and the final flight ends at the vertical-velocity zero
/// crossing. The returned apex height is measured above `ground_z`.
pub fn integrate_apex_to_apex(
    params: &TemplateParams,
    apex: &ApexState,
    u: &LegCommand,
    ground_z: f64,
) -> Result<(ApexState, HybridTrace), SimError> {
    let mut trace = HybridTrace::default();
    let out = apex_step(params, apex, u, ground_z, Some(&mut trace))?;
    Ok((out.apex, trace))
}

/// Trace-free passive return map for solver loops.
pub fn passive_return_map(
    params: &TemplateParams,
    apex: &ApexState,
    u: &LegCommand,
    ground_z: f64,
) -> Result<ApexState, SimError> {
    Ok(apex_step(params, apex, u, ground_z, None)?.apex)
}

/// Full passive step with optional trace.
pub fn apex_step(
    params: &TemplateParams,
    apex: &ApexState,
    u: &LegCommand,
    ground_z: f64,
    trace: Option<&mut HybridTrace>,
) -> Result<StepOutcome, SimError> {
    let mut rec = Recorder { trace };
    let start = Body {
        p: Vector3::new(0.0, 0.0, ground_z + apex.h),
        v: Vector3::new(apex.vx, apex.vy, 0.0),
        t: 0.0,
    };

    let clearance = foot_kinematics(&start.p, u, params.yh).z - ground_z;
    if clearance < -1e-9 {
        return Err(SimError::ImmediateTouchdown(-clearance));
    }

    // Flight until the held foot reaches the ground.
    let ballistic = {
        let g = params.gravity();
        move |_: &Vector3<f64>| g
    };
    let td = if clearance <= 0.0 {
        start
    } else {
        let touch = |s: &Body| ground_z - foot_kinematics(&s.p, u, params.yh).z;
        let mut s = start;
        rec.sample(&s, Phase::Flight, foot_kinematics(&s.p, u, params.yh), Vector3::zeros());
        loop {
            let next = rk4_step(&ballistic, &s, FLIGHT_DT);
            if touch(&next) >= 0.0 {
                break bisect_event(&ballistic, &s, FLIGHT_DT, &touch);
            }
            s = next;
            rec.sample(&s, Phase::Flight, foot_kinematics(&s.p, u, params.yh), Vector3::zeros());
            if s.t > MAX_PHASE_TIME {
                return Err(SimError::NoTouchdown(MAX_PHASE_TIME));
            }
        }
    };

    // Pin the foot on the ground plane.
    let mut pf = foot_kinematics(&td.p, u, params.yh);
    pf.z = ground_z;
    rec.event(EventKind::Touchdown, &td, pf);

    let lo = integrate_stance(params, &td, &pf, ground_z, &mut rec)?;
    rec.event(EventKind::Liftoff, &lo, pf);

    // Flight to the apex. The vertical velocity is linear in time, so a
    // non-positive value at liftoff means the apex is the liftoff point.
    let apex_body = if lo.v.z <= 0.0 {
        lo
    } else {
        let crest = |s: &Body| -s.v.z;
        let mut s = lo;
        loop {
            let next = rk4_step(&ballistic, &s, FLIGHT_DT);
            if crest(&next) >= 0.0 {
                break bisect_event(&ballistic, &s, FLIGHT_DT, &crest);
            }
            s = next;
            rec.sample(&s, Phase::Flight, foot_kinematics(&s.p, u, params.yh), Vector3::zeros());
        }
    };
    rec.event(
        EventKind::Apex,
        &apex_body,
        foot_kinematics(&apex_body.p, u, params.yh),
    );

    Ok(StepOutcome {
        apex: ApexState::new(apex_body.v.x, apex_body.v.y, apex_body.p.z - ground_z),
        touchdown: td.com(),
        foot: pf,
        liftoff: lo.com(),
        apex_event: apex_body.com(),
    })
}

/// Stance integration from a touchdown state with the foot pinned at `pf`.
///
/// A command with the leg longer than rest length at foot strike leaves the
/// dynamics ballistic until the leg shortens to rest length; that engagement
/// crossing is located by bisection so no integration step straddles the
/// onset of spring force. Returns the liftoff state.
fn integrate_stance(
    params: &TemplateParams,
    td: &Body,
    pf: &Vector3<f64>,
    ground_z: f64,
    rec: &mut Recorder<'_>,
) -> Result<Body, SimError> {
    let gravity = params.gravity();
    let spring = params.k / params.m;
    let r0 = params.r0;
    let pf = *pf;
    let accel = move |p: &Vector3<f64>| {
        let r = p - pf;
        let len = r.norm();
        if len < r0 && len > LEG_SINGULARITY {
            r * (spring * (r0 - len) / len) + gravity
        } else {
            gravity
        }
    };
    let force = |p: &Vector3<f64>| {
        let r = p - pf;
        let len = r.norm();
        if len < r0 && len > LEG_SINGULARITY {
            r * (params.k * (r0 - len) / len)
        } else {
            Vector3::zeros()
        }
    };

    let mut s = *td;
    let t_start = s.t;
    rec.sample(&s, Phase::Stance, pf, force(&s.p));

    // Ballistic segment with the foot pinned but the leg still extended.
    if (s.p - pf).norm() >= r0 - 1e-9 {
        let ballistic = move |_: &Vector3<f64>| gravity;
        let engage = |b: &Body| r0 - (b.p - pf).norm();
        if engage(&s) < 0.0 {
            loop {
                let next = rk4_step(&ballistic, &s, STANCE_DT);
                if next.p.z - ground_z <= 0.0 {
                    return Err(SimError::Crashed(next.t));
                }
                if engage(&next) >= 0.0 {
                    s = bisect_event(&ballistic, &s, STANCE_DT, &engage);
                    break;
                }
                s = next;
                rec.sample(&s, Phase::Stance, pf, Vector3::zeros());
                if s.t - t_start > MAX_PHASE_TIME {
                    return Err(SimError::StanceNeverEngaged);
                }
            }
            rec.sample(&s, Phase::Stance, pf, force(&s.p));
        }
    }

    // Compressed leg until the extension back through rest length.
    loop {
        let next = rk4_step(&accel, &s, STANCE_DT);
        if next.p.z - ground_z <= 0.0 {
            return Err(SimError::Crashed(next.t));
        }
        if (next.p - pf).norm() >= r0 {
            let lift = |b: &Body| (b.p - pf).norm() - r0;
            let lo = bisect_event(&accel, &s, STANCE_DT, &lift);
            rec.sample(&lo, Phase::Stance, pf, force(&lo.p));
            return Ok(lo);
        }
        s = next;
        rec.sample(&s, Phase::Stance, pf, force(&s.p));
        if s.t - t_start > MAX_PHASE_TIME {
            return Err(SimError::StuckInStance(MAX_PHASE_TIME));
        }
    }
}

/// Ballistic flight from `from` with the foot held by `u`, ending at the
/// descending crossing of the foot through `ground_z`. A liftoff state has
/// the next commanded foot exactly at ground level while rising, so a start
/// with the foot at or below ground only touches down immediately when the
/// CoM is already descending. Returns the touchdown state and pinned foot.
pub fn flight_to_touchdown(
    params: &TemplateParams,
    from: &ComState,
    u: &LegCommand,
    ground_z: f64,
) -> Result<(ComState, Vector3<f64>), SimError> {
    let ballistic = {
        let g = params.gravity();
        move |_: &Vector3<f64>| g
    };
    let touch = |s: &Body| ground_z - foot_kinematics(&s.p, u, params.yh).z;
    let mut s = Body {
        p: from.p,
        v: from.v,
        t: from.t,
    };
    let t_start = s.t;
    let mut armed = touch(&s) < 0.0;
    if !armed && s.v.z <= 0.0 {
        let mut pf = foot_kinematics(&s.p, u, params.yh);
        pf.z = ground_z;
        return Ok((s.com(), pf));
    }
    let td = loop {
        let next = rk4_step(&ballistic, &s, FLIGHT_DT);
        if armed && touch(&next) >= 0.0 {
            break bisect_event(&ballistic, &s, FLIGHT_DT, &touch);
        }
        if !armed {
            if touch(&next) < 0.0 {
                armed = true;
            } else if next.v.z <= 0.0 {
                // The foot never cleared the ground on the way up: it
                // strikes as soon as the flight starts to descend.
                let crest = |b: &Body| -b.v.z;
                break bisect_event(&ballistic, &s, FLIGHT_DT, &crest);
            }
        }
        s = next;
        if s.t - t_start > MAX_PHASE_TIME {
            return Err(SimError::NoTouchdown(MAX_PHASE_TIME));
        }
    };
    let mut pf = foot_kinematics(&td.p, u, params.yh);
    pf.z = ground_z;
    Ok((td.com(), pf))
}

/// Passive stance from a touchdown state, reporting every integration node
/// through `on_sample(t_since_touchdown, p, v, a)`. Returns the liftoff state.
pub fn passive_stance_sampled(
    params: &TemplateParams,
    td: &ComState,
    pf: &Vector3<f64>,
    ground_z: f64,
    mut on_sample: impl FnMut(f64, &Vector3<f64>, &Vector3<f64>, &Vector3<f64>),
) -> Result<ComState, SimError> {
    let mut trace = HybridTrace::default();
    let mut rec = Recorder {
        trace: Some(&mut trace),
    };
    let body = Body {
        p: td.p,
        v: td.v,
        t: td.t,
    };
    let lo = integrate_stance(params, &body, pf, ground_z, &mut rec)?;
    for s in &trace.samples {
        let a = s.force / params.m + params.gravity();
        on_sample(s.t - td.t, &s.p, &s.v, &a);
    }
    Ok(lo.com())
}

/// Reverse-time ballistic flight from a touchdown state back to the moment
/// the leg vector to the previous foothold `pf_prev` had rest length.
pub fn back_flight_to_liftoff(
    params: &TemplateParams,
    td: &ComState,
    pf_prev: &Vector3<f64>,
) -> Result<ComState, SimError> {
    let ballistic = {
        let g = params.gravity();
        move |_: &Vector3<f64>| g
    };
    let reach = |s: &Body| params.r0 - (s.p - pf_prev).norm();
    let mut s = Body {
        p: td.p,
        v: td.v,
        t: td.t,
    };
    if reach(&s) >= 0.0 {
        return Err(SimError::FootNeverLands);
    }
    let t_start = s.t;
    let lo = loop {
        let next = rk4_step(&ballistic, &s, -FLIGHT_DT);
        if reach(&next) >= 0.0 {
            break bisect_event(&ballistic, &s, -FLIGHT_DT, &reach);
        }
        s = next;
        if t_start - s.t > MAX_PHASE_TIME {
            return Err(SimError::FootNeverLands);
        }
    };
    Ok(lo.com())
}

/// Reverse-time ballistic motion from a state whose commanded foot is below
/// the ground plane, back to the instant the foot was at ground level (the
/// foot-strike moment for a command that pins the leg above rest length).
pub fn back_ballistic_to_pin(
    params: &TemplateParams,
    from: &ComState,
    u: &LegCommand,
    ground_z: f64,
) -> Result<ComState, SimError> {
    let ballistic = {
        let g = params.gravity();
        move |_: &Vector3<f64>| g
    };
    let at_ground = |s: &Body| foot_kinematics(&s.p, u, params.yh).z - ground_z;
    let mut s = Body {
        p: from.p,
        v: from.v,
        t: from.t,
    };
    if at_ground(&s) >= 0.0 {
        return Ok(s.com());
    }
    let t_start = s.t;
    loop {
        let next = rk4_step(&ballistic, &s, -STANCE_DT);
        if at_ground(&next) >= 0.0 {
            return Ok(bisect_event(&ballistic, &s, -STANCE_DT, &at_ground).com());
        }
        s = next;
        if t_start - s.t > MAX_PHASE_TIME {
            return Err(SimError::FootNeverLands);
        }
    }
}

/// Reverse-time passive stance from a liftoff state around `pf`, ending at
/// the crossing where the leg extends back through rest length (the spring
/// engagement point of the forward stance). For commands that strike with
/// the leg above rest length, follow with [`back_ballistic_to_pin`] to
/// recover the foot-strike state.
pub fn back_stance_to_rest_length(
    params: &TemplateParams,
    lo: &ComState,
    pf: &Vector3<f64>,
) -> Result<ComState, SimError> {
    let gravity = params.gravity();
    let spring = params.k / params.m;
    let r0 = params.r0;
    let pf = *pf;
    let accel = move |p: &Vector3<f64>| {
        let r = p - pf;
        let len = r.norm();
        if len < r0 && len > LEG_SINGULARITY {
            r * (spring * (r0 - len) / len) + gravity
        } else {
            gravity
        }
    };
    let mut s = Body {
        p: lo.p,
        v: lo.v,
        t: lo.t,
    };
    let t_start = s.t;
    let mut engaged = (s.p - pf).norm() < r0 - 1e-9;
    loop {
        let next = rk4_step(&accel, &s, -STANCE_DT);
        let len_next = (next.p - pf).norm();
        if engaged && len_next >= r0 {
            let extend = |b: &Body| (b.p - pf).norm() - r0;
            return Ok(bisect_event(&accel, &s, -STANCE_DT, &extend).com());
        }
        if len_next < r0 - 1e-9 {
            engaged = true;
        }
        s = next;
        if t_start - s.t > MAX_PHASE_TIME {
            return Err(if engaged {
                SimError::StuckInStance(MAX_PHASE_TIME)
            } else {
                SimError::StanceNeverEngaged
            });
        }
    }
}

/// Mechanical energy of a state given the pinned foot (spring term only
/// while the leg is compressed).
pub fn mechanical_energy(
    params: &TemplateParams,
    p: &Vector3<f64>,
    v: &Vector3<f64>,
    pf: Option<&Vector3<f64>>,
) -> f64 {
    let kinetic = 0.5 * params.m * v.norm_squared();
    let potential = params.m * params.g * p.z;
    let spring = match pf {
        Some(pf) => {
            let c = params.r0 - (p - pf).norm();
            if c > 0.0 {
                0.5 * params.k * c * c
            } else {
                0.0
            }
        }
        None => 0.0,
    };
    kinetic + potential + spring
}
