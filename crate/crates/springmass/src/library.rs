//! Periodic trajectory search over a parameter grid and the stepping
//! distances derived from each gait.
//!
//! A trajectory is periodic when one apex maps to the next through the leg
//! switch: `x_{j+1} = E x_j` with `E = diag(1, -1, 1)`. For chosen apex
//! height, stiffness, forward velocity, and lateral leg angle, the two free
//! parameters (touchdown angle `th1` and apex lateral velocity `vy`) are
//! solved by a damped Gauss-Newton iteration on the return-map residual.

use nalgebra::{Matrix3x2, Vector2, Vector3};

use crate::dynamics::{apex_step, flight_times, leg_offset, passive_return_map};
use crate::error::{SimError, SolveError};
use crate::params::TemplateParams;
use crate::state::{ApexState, ComState, LegCommand, Side};

/// Residual tolerance a library entry must meet.
pub const RESIDUAL_TOL: f64 = 1e-6;
/// The solver iterates until the residual falls below this.
const SOLVE_TOL: f64 = 1e-9;
/// Iteration budget of one periodic solve.
const MAX_ITERATIONS: usize = 200;
/// Finite-difference step for the solver's residual Jacobian.
const FD_STEP: f64 = 1e-6;

/// One periodic running gait: the selected grid parameters, the solved
/// touchdown angle and apex lateral velocity, and the flat-ground stepping
/// distances. Entries are canonical for a `Side::PlusY` stance; the mirrored
/// step uses the same numbers with the side flag flipped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryEntry {
    /// Selected lateral leg angle [rad].
    pub th2: f64,
    /// Selected apex height [m].
    pub h_apex: f64,
    /// Selected spring stiffness [N/m].
    pub k: f64,
    /// Selected forward apex velocity [m/s].
    pub vx_apex: f64,
    /// Solved longitudinal touchdown angle [rad].
    pub th1: f64,
    /// Solved apex lateral velocity [m/s].
    pub vy_apex: f64,
    /// Nominal flat-ground step displacement, longitudinal [m].
    pub dfx: f64,
    /// Nominal flat-ground step displacement, lateral [m].
    pub dfy: f64,
    /// Periodicity residual `|x - E x'|` of the stored solution.
    pub residual: f64,
}

impl TrajectoryEntry {
    /// The entry's apex state (canonical stance side).
    pub fn apex(&self) -> ApexState {
        ApexState::new(self.vx_apex, self.vy_apex, self.h_apex)
    }

    /// The entry's periodic leg command: solved angles with the leg at rest
    /// length, on the canonical side.
    pub fn command(&self, r0: f64) -> LegCommand {
        LegCommand::new(self.th1, self.th2, r0, Side::PlusY)
    }
}

/// A point of the build grid that failed to solve.
#[derive(Debug, Clone, PartialEq)]
pub struct FailedPoint {
    pub th2: f64,
    pub h_apex: f64,
    pub k: f64,
    pub vx_apex: f64,
    pub reason: String,
}

/// Axes of the build grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub vx: Vec<f64>,
    pub h: Vec<f64>,
    pub k: Vec<f64>,
    pub th2: Vec<f64>,
}

impl GridSpec {
    /// The grid this crate builds by default: forward velocity 0..=2 m/s in
    /// 0.1 steps, five apex heights, three stiffnesses, one lateral angle.
    pub fn default_grid() -> Self {
        Self {
            vx: (0..=20).map(|i| i as f64 * 0.1).collect(),
            h: vec![0.90, 0.925, 0.95, 0.975, 1.0],
            k: vec![6000.0, 8000.0, 10000.0],
            th2: vec![0.0],
        }
    }

    pub fn cardinality(&self) -> usize {
        self.vx.len() * self.h.len() * self.k.len() * self.th2.len()
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        Self::default_grid()
    }
}

/// An ordered collection of periodic trajectories with its grid metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLibrary {
    pub entries: Vec<TrajectoryEntry>,
    pub grid: GridSpec,
    pub failures: Vec<FailedPoint>,
    /// File format version the library is written as.
    pub version: u32,
}

/// Result of one periodic solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeriodicSolution {
    pub th1: f64,
    pub vy: f64,
    pub residual: f64,
    pub iterations: usize,
}

fn residual_vector(
    params: &TemplateParams,
    h: f64,
    k: f64,
    vx: f64,
    th2: f64,
    th1: f64,
    vy: f64,
) -> Result<Vector3<f64>, SimError> {
    let p = params.with_k(k);
    let apex = ApexState::new(vx, vy, h);
    let u = LegCommand::new(th1, th2, params.r0, Side::PlusY);
    let next = passive_return_map(&p, &apex, &u, 0.0)?;
    // x - E x' with E = diag(1, -1, 1).
    Ok(Vector3::new(vx - next.vx, vy + next.vy, h - next.h))
}

/// Solve the periodic trajectory search problem in `(th1, vy)` for the
/// selected `(h, k, vx, th2)` by a Levenberg-Marquardt damped Gauss-Newton
/// iteration on central finite-difference residual Jacobians.
pub fn solve_periodic(
    params: &TemplateParams,
    h: f64,
    k: f64,
    vx: f64,
    th2: f64,
    guess: (f64, f64),
) -> Result<PeriodicSolution, SolveError> {
    let mut z = Vector2::new(guess.0, guess.1);
    let eval = |z: &Vector2<f64>| residual_vector(params, h, k, vx, th2, z.x, z.y);

    let mut r = eval(&z).map_err(SolveError::BadInitialPoint)?;
    let mut lambda = 1e-3;
    for iter in 0..MAX_ITERATIONS {
        if r.norm() < SOLVE_TOL {
            return Ok(PeriodicSolution {
                th1: z.x,
                vy: z.y,
                residual: r.norm(),
                iterations: iter,
            });
        }

        // Central-difference Jacobian of the residual.
        let mut jac = Matrix3x2::zeros();
        for col in 0..2 {
            let mut hi = z;
            let mut lo = z;
            hi[col] += FD_STEP;
            lo[col] -= FD_STEP;
            match (eval(&hi), eval(&lo)) {
                (Ok(rh), Ok(rl)) => jac.set_column(col, &((rh - rl) / (2.0 * FD_STEP))),
                _ => {
                    // One-sided fallback at the edge of the feasible region.
                    let (side, sign) = match eval(&hi) {
                        Ok(rh) => (rh, 1.0),
                        Err(_) => match eval(&lo) {
                            Ok(rl) => (rl, -1.0),
                            Err(e) => {
                                return Err(SolveError::NoPeriodicSolution {
                                    iterations: iter,
                                    residual: r.norm(),
                                })
                                .map_err(|_| SolveError::BadInitialPoint(e))
                            }
                        },
                    };
                    jac.set_column(col, &((side - r) * (sign / FD_STEP)));
                }
            }
        }

        let jtj = jac.transpose() * jac;
        let jtr = jac.transpose() * r;

        // Damped steps until one improves the residual.
        let mut improved = false;
        for _ in 0..12 {
            let mut damped = jtj;
            damped[(0, 0)] += lambda * jtj[(0, 0)].max(1e-12);
            damped[(1, 1)] += lambda * jtj[(1, 1)].max(1e-12);
            let Some(inv) = damped.try_inverse() else {
                lambda *= 4.0;
                continue;
            };
            let step = -(inv * jtr);
            let trial = z + step;
            match eval(&trial) {
                Ok(rt) if rt.norm() < r.norm() => {
                    z = trial;
                    r = rt;
                    lambda = (lambda / 3.0).max(1e-12);
                    improved = true;
                    break;
                }
                _ => lambda *= 4.0,
            }
        }
        if !improved {
            return Err(SolveError::NoPeriodicSolution {
                iterations: iter,
                residual: r.norm(),
            });
        }
    }
    Err(SolveError::NoPeriodicSolution {
        iterations: MAX_ITERATIONS,
        residual: r.norm(),
    })
}

/// Seed for the first point of a velocity sweep: a small forward lean that
/// scales with speed and a nominal lateral sway.
pub fn initial_guess(vx: f64) -> (f64, f64) {
    (0.12 * vx, 0.05)
}

/// Solve every grid point. Within each `(th2, h, k)` slice the sweep runs
/// along ascending `vx` and warm-starts each solve from the previous
/// solution; solutions are identical to cold-started ones, so slices may be
/// computed in any order. Failures are recorded, never silently dropped.
pub fn build_library(params: &TemplateParams, grid: &GridSpec) -> TrajectoryLibrary {
    let mut entries = Vec::with_capacity(grid.cardinality());
    let mut failures = Vec::new();
    for &th2 in &grid.th2 {
        for &h in &grid.h {
            for &k in &grid.k {
                let mut warm: Option<(f64, f64)> = None;
                for &vx in &grid.vx {
                    let guess = warm.unwrap_or_else(|| initial_guess(vx));
                    match solve_periodic(params, h, k, vx, th2, guess) {
                        Ok(sol) => {
                            warm = Some((sol.th1, sol.vy));
                            match finish_entry(params, h, k, vx, th2, &sol) {
                                Ok(entry) => entries.push(entry),
                                Err(e) => failures.push(FailedPoint {
                                    th2,
                                    h_apex: h,
                                    k,
                                    vx_apex: vx,
                                    reason: e.to_string(),
                                }),
                            }
                        }
                        Err(e) => {
                            warm = None;
                            failures.push(FailedPoint {
                                th2,
                                h_apex: h,
                                k,
                                vx_apex: vx,
                                reason: e.to_string(),
                            });
                        }
                    }
                }
            }
        }
    }
    TrajectoryLibrary {
        entries,
        grid: grid.clone(),
        failures,
        version: 1,
    }
}

fn finish_entry(
    params: &TemplateParams,
    h: f64,
    k: f64,
    vx: f64,
    th2: f64,
    sol: &PeriodicSolution,
) -> Result<TrajectoryEntry, SimError> {
    let mut entry = TrajectoryEntry {
        th2,
        h_apex: h,
        k,
        vx_apex: vx,
        th1: sol.th1,
        vy_apex: sol.vy,
        dfx: 0.0,
        dfy: 0.0,
        residual: sol.residual,
    };
    let (dfx, dfy) = nominal_step_displacement(&entry, params, 0.0)?;
    entry.dfx = dfx;
    entry.dfy = dfy;
    Ok(entry)
}

/// Nominal step displacement of a periodic entry between two consecutive
/// foot placements, for a landing surface `delta_z` above the takeoff
/// surface. Canonical stance side (`Side::PlusY`); mirror the lateral
/// component for the other side.
///
/// The trajectory is symmetric, so the liftoff leg mirrors the touchdown
/// leg (`th1_LO = -th1*`) and the displacement reduces to the flight travel
/// plus twice the leg's forward reach, with the lateral part combining the
/// hip offset, the lateral leg angle, and the flight sway.
pub fn nominal_step_displacement(
    entry: &TrajectoryEntry,
    params: &TemplateParams,
    delta_z: f64,
) -> Result<(f64, f64), SimError> {
    let u = entry.command(params.r0);
    let (t_rise, t_fall) = flight_times(entry.h_apex, &u, delta_z, params.g)?;
    let t_flight = t_rise + t_fall;
    let (s1, c1) = entry.th1.sin_cos();
    let (s2, c2) = entry.th2.sin_cos();
    let sigma = u.sigma.sign();
    // The flight after the canonical stance carries the mirrored apex sway.
    let dfx = t_flight * entry.vx_apex + 2.0 * params.r0 * s1 * c2;
    let dfy = t_flight * (-entry.vy_apex) - 2.0 * sigma * (params.yh + params.r0 * s2);
    Ok((dfx, dfy))
}

/// Step displacement recomputed at an actual liftoff moment: the realized
/// leg vector, the realized ballistic flight, and the commanded next
/// touchdown leg. Makes no symmetry assumption, so it stays valid after
/// disturbances. `delta_z` is the target surface height above the current
/// foothold's surface.
pub fn liftoff_step_displacement(
    state_lo: &ComState,
    pf_current: &Vector3<f64>,
    u_next: &LegCommand,
    params: &TemplateParams,
    delta_z: f64,
) -> Result<(f64, f64), SimError> {
    let r_lo = state_lo.p - pf_current;
    let offset_next = leg_offset(u_next, params.yh);

    // Flight ends when the commanded foot reaches the target surface:
    // p_z(t) = z_target + lh cos th1 cos th2.
    let z_target = pf_current.z + delta_z;
    let z_touch = z_target - offset_next.z;
    let vz = state_lo.v.z;
    let drop = state_lo.p.z - z_touch;
    let radicand = vz * vz + 2.0 * params.g * drop;
    if radicand < 0.0 {
        return Err(SimError::FootNeverLands);
    }
    let t_flight = (vz + radicand.sqrt()) / params.g;
    if t_flight < 0.0 {
        return Err(SimError::FootNeverLands);
    }

    let flight = Vector3::new(
        state_lo.v.x * t_flight,
        state_lo.v.y * t_flight,
        -drop,
    );
    let step = r_lo + flight + offset_next;
    Ok((step.x, step.y))
}

/// Re-integrates an entry's apex-to-apex step and returns the periodicity
/// residual `|x - E x'|`. Library invariant: below [`RESIDUAL_TOL`] for
/// every stored entry.
pub fn reproduction_residual(
    entry: &TrajectoryEntry,
    params: &TemplateParams,
) -> Result<f64, SimError> {
    let p = params.with_k(entry.k);
    let next = passive_return_map(&p, &entry.apex(), &entry.command(params.r0), 0.0)?;
    let x = entry.apex().as_vector();
    let xn = next.as_vector();
    Ok(Vector3::new(x.x - xn.x, x.y + xn.y, x.z - xn.z).norm())
}

/// The entry's full passive step outcome (touchdown, liftoff, events) on
/// flat ground, used to anchor references and back-integration.
pub fn entry_step(
    entry: &TrajectoryEntry,
    params: &TemplateParams,
) -> Result<crate::dynamics::StepOutcome, SimError> {
    let p = params.with_k(entry.k);
    apex_step(&p, &entry.apex(), &entry.command(params.r0), 0.0, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn params() -> TemplateParams {
        TemplateParams::default()
    }

    fn centered() -> TemplateParams {
        TemplateParams {
            yh: 0.0,
            ..TemplateParams::default()
        }
    }

    #[test]
    fn vertical_hop_with_centered_hip_is_trivially_periodic() {
        // Full sagittal symmetry: the periodic solution is exactly
        // (th1, vy) = (0, 0).
        let p = centered();
        let sol = solve_periodic(&p, 0.95, 8000.0, 0.0, 0.0, (0.0, 0.05)).unwrap();
        assert!(sol.th1.abs() < 1e-9, "th1 = {}", sol.th1);
        assert!(sol.vy.abs() < 1e-7, "vy = {}", sol.vy);
        assert!(sol.residual < RESIDUAL_TOL);
    }

    #[test]
    fn running_solution_converges_and_matches_grid_search() {
        let p = params();
        let sol = solve_periodic(&p, 0.95, 8000.0, 1.0, 0.0, initial_guess(1.0)).unwrap();
        assert!(sol.residual < RESIDUAL_TOL);
        assert!(sol.th1 > 0.0);

        // Brute-force oracle: refine a 2D grid over (th1, vy) minimizing the
        // same residual norm, independent of the Gauss-Newton path.
        let mut best = (f64::INFINITY, 0.0, 0.0);
        let mut c1 = 0.15;
        let mut c2 = 0.3;
        let mut w1 = 0.15;
        let mut w2 = 0.3;
        for _ in 0..4 {
            for i in 0..=20 {
                for j in 0..=20 {
                    let th1 = c1 - w1 + 2.0 * w1 * (i as f64) / 20.0;
                    let vy = c2 - w2 + 2.0 * w2 * (j as f64) / 20.0;
                    if let Ok(r) = residual_vector(&p, 0.95, 8000.0, 1.0, 0.0, th1, vy) {
                        if r.norm() < best.0 {
                            best = (r.norm(), th1, vy);
                        }
                    }
                }
            }
            c1 = best.1;
            c2 = best.2;
            w1 /= 8.0;
            w2 /= 8.0;
        }
        assert!(
            (best.1 - sol.th1).abs() < 1e-3,
            "grid {} vs solver {}",
            best.1,
            sol.th1
        );
        assert!((best.2 - sol.vy).abs() < 1e-3);
    }

    #[test]
    fn softer_springs_need_steeper_touchdown_angles() {
        let p = params();
        let soft = solve_periodic(&p, 0.95, 6000.0, 1.0, 0.0, initial_guess(1.0)).unwrap();
        let stiff = solve_periodic(&p, 0.95, 10000.0, 1.0, 0.0, initial_guess(1.0)).unwrap();
        assert!(
            soft.th1 > stiff.th1,
            "soft {} vs stiff {}",
            soft.th1,
            stiff.th1
        );
    }

    #[test]
    fn single_point_grid_builds_one_entry() {
        let p = params();
        let grid = GridSpec {
            vx: vec![0.0],
            h: vec![0.95],
            k: vec![8000.0],
            th2: vec![0.0],
        };
        let lib = build_library(&p, &grid);
        assert_eq!(lib.entries.len(), 1);
        assert!(lib.failures.is_empty());
        assert!(lib.entries[0].th1.abs() < 1e-7);
    }

    #[test]
    fn warm_and_cold_started_solves_agree() {
        let p = params();
        let grid = GridSpec {
            vx: vec![0.0, 0.5, 1.0],
            h: vec![0.95],
            k: vec![8000.0],
            th2: vec![0.0],
        };
        let lib = build_library(&p, &grid);
        assert_eq!(lib.entries.len(), 3);
        for e in &lib.entries {
            let cold = solve_periodic(&p, e.h_apex, e.k, e.vx_apex, e.th2, initial_guess(e.vx_apex))
                .unwrap();
            assert!(
                (cold.th1 - e.th1).abs() < 1e-6,
                "cold {} warm {}",
                cold.th1,
                e.th1
            );
            assert!((cold.vy - e.vy_apex).abs() < 1e-6);
        }
    }

    #[test]
    fn entries_reproduce_themselves() {
        let p = params();
        let grid = GridSpec {
            vx: vec![0.0, 1.0, 2.0],
            h: vec![0.90, 1.0],
            k: vec![8000.0],
            th2: vec![0.0],
        };
        let lib = build_library(&p, &grid);
        assert_eq!(lib.entries.len(), 6, "failures: {:?}", lib.failures);
        for e in &lib.entries {
            let res = reproduction_residual(e, &p).unwrap();
            assert!(res < RESIDUAL_TOL, "entry vx={} residual {res}", e.vx_apex);
        }
    }

    #[test]
    fn zero_velocity_displacement_is_pure_geometry() {
        let p = params();
        let sol = solve_periodic(&p, 0.95, 8000.0, 0.0, 0.0, (0.0, 0.05)).unwrap();
        let entry = finish_entry(&p, 0.95, 8000.0, 0.0, 0.0, &sol).unwrap();
        // th1 = 0 at vx = 0, so the longitudinal displacement has no leg
        // contribution; the flight term vanishes with vx.
        assert!(entry.dfx.abs() < 1e-7, "dfx = {}", entry.dfx);
        // Lateral: hip offset on both sides plus the flight sway.
        let u = entry.command(p.r0);
        let (tr, tf) = flight_times(entry.h_apex, &u, 0.0, p.g).unwrap();
        let expected = -(tr + tf) * entry.vy_apex - 2.0 * p.yh;
        assert_relative_eq!(entry.dfy, expected, epsilon = 1e-12);
        assert!(entry.dfy < 0.0, "next foothold lies on the minus side");
    }

    #[test]
    fn stepping_up_shortens_and_down_lengthens_the_step() {
        let p = params();
        let sol = solve_periodic(&p, 0.95, 8000.0, 1.0, 0.0, initial_guess(1.0)).unwrap();
        let entry = finish_entry(&p, 0.95, 8000.0, 1.0, 0.0, &sol).unwrap();
        let (up, _) = nominal_step_displacement(&entry, &p, 0.05).unwrap();
        let (flat, _) = nominal_step_displacement(&entry, &p, 0.0).unwrap();
        let (down, _) = nominal_step_displacement(&entry, &p, -0.05).unwrap();
        assert!(up < flat && flat < down, "{up} {flat} {down}");
    }

    #[test]
    fn displacement_grows_with_apex_height() {
        let p = params();
        let mut prev = None;
        for h in [0.90, 0.95, 1.0] {
            let sol = solve_periodic(&p, h, 8000.0, 1.0, 0.0, initial_guess(1.0)).unwrap();
            let entry = finish_entry(&p, h, 8000.0, 1.0, 0.0, &sol).unwrap();
            if let Some(prev) = prev {
                assert!(entry.dfx > prev, "dfx {} at h {}", entry.dfx, h);
            }
            prev = Some(entry.dfx);
        }
    }

    #[test]
    fn wider_lateral_angle_widens_the_lateral_displacement() {
        let p = params();
        let mut prev: Option<f64> = None;
        for th2 in [0.0, 0.05, 0.1] {
            let sol = solve_periodic(&p, 0.95, 8000.0, 1.0, th2, initial_guess(1.0)).unwrap();
            let entry = finish_entry(&p, 0.95, 8000.0, 1.0, th2, &sol).unwrap();
            if let Some(prev) = prev {
                assert!(
                    entry.dfy.abs() > prev.abs(),
                    "dfy {} at th2 {}",
                    entry.dfy,
                    th2
                );
            }
            prev = Some(entry.dfy);
        }
    }

    #[test]
    fn undisturbed_liftoff_displacement_matches_nominal() {
        let p = params();
        let sol = solve_periodic(&p, 0.95, 8000.0, 1.0, 0.0, initial_guess(1.0)).unwrap();
        let entry = finish_entry(&p, 0.95, 8000.0, 1.0, 0.0, &sol).unwrap();
        let out = entry_step(&entry, &p).unwrap();
        let u_next = LegCommand {
            sigma: Side::MinusY,
            ..entry.command(p.r0)
        };
        let (dfx, dfy) = liftoff_step_displacement(&out.liftoff, &out.foot, &u_next, &p, 0.0).unwrap();
        assert_relative_eq!(dfx, entry.dfx, epsilon = 1e-6);
        assert_relative_eq!(dfy, entry.dfy, epsilon = 1e-6);
    }

    #[test]
    fn reduced_liftoff_speed_shortens_the_step() {
        let p = params();
        let sol = solve_periodic(&p, 0.95, 8000.0, 1.0, 0.0, initial_guess(1.0)).unwrap();
        let entry = finish_entry(&p, 0.95, 8000.0, 1.0, 0.0, &sol).unwrap();
        let out = entry_step(&entry, &p).unwrap();
        let u_next = LegCommand {
            sigma: Side::MinusY,
            ..entry.command(p.r0)
        };
        let mut slow = out.liftoff;
        slow.v.z *= 0.9;
        let (dfx, _) = liftoff_step_displacement(&slow, &out.foot, &u_next, &p, 0.0).unwrap();
        assert!(dfx < entry.dfx, "dfx {dfx} vs nominal {}", entry.dfx);

        // Integrator oracle for the perturbed flight arc.
        let (td, pf_next) = crate::dynamics::flight_to_touchdown(&p, &slow, &u_next, 0.0).unwrap();
        let _ = td;
        let oracle_dfx = pf_next.x - out.foot.x;
        assert_relative_eq!(dfx, oracle_dfx, epsilon = 1e-6);
    }
}
