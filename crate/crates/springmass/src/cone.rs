//! The feasible polyhedral force cone of a rectangular foot and the
//! projection of desired control forces onto it.
//!
//! Feasible leg forces are nonnegative combinations of the four unit vectors
//! from the foot corners to the CoM, further cut by the per-axis friction
//! pyramid. Both sets are polyhedral cones through the origin, so the
//! projection problem
//!
//! ```text
//!     min_a |fd - V a|    s.t.  a >= 0,  |(Va)_x| <= mu (Va)_z,  |(Va)_y| <= mu (Va)_z
//! ```
//!
//! is the Euclidean projection of `fd` onto an intersection of half-spaces
//! through the origin in force space. With at most eight faces the optimum
//! lies on the cone interior, a facet plane, an edge ray, or the apex, and
//! all candidates can be enumerated exactly with deterministic arithmetic.
//! The multipliers are recovered afterwards by a small nonnegative
//! least-squares solve.

use nalgebra::{Matrix3x4, Vector3, Vector4};

use crate::error::SimError;
use crate::params::TemplateParams;

/// Optimality gap below which a desired force counts as already feasible.
pub const PROJECTION_TOL: f64 = 1e-9;

/// Corner unit vectors from the foot rectangle to the CoM plus the friction
/// coefficient: everything needed to decide force feasibility.
#[derive(Debug, Clone)]
pub struct ForceCone {
    /// Columns: unit vectors from the four foot corners to the CoM.
    pub v: Matrix3x4<f64>,
    pub mu: f64,
    /// Outward normals of the feasible set's half-spaces (`n^T f <= 0`).
    faces: Vec<Vector3<f64>>,
}

impl ForceCone {
    /// Builds the cone for a CoM position above a foot centred at `pf`.
    pub fn new(
        params: &TemplateParams,
        com: &Vector3<f64>,
        pf: &Vector3<f64>,
    ) -> Result<Self, SimError> {
        let hx = params.foot_len / 2.0;
        let hy = params.foot_wid / 2.0;
        let mut v = Matrix3x4::zeros();
        for (idx, (sx, sy)) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)]
            .iter()
            .enumerate()
        {
            let corner = Vector3::new(pf.x + sx * hx, pf.y + sy * hy, pf.z);
            let dir = com - corner;
            let len = dir.norm();
            if len < 1e-9 || dir.z <= 1e-9 {
                return Err(SimError::DegenerateCone);
            }
            v.set_column(idx, &(dir / len));
        }
        let faces = Self::build_faces(&v, params.mu);
        Ok(Self {
            v,
            mu: params.mu,
            faces,
        })
    }

    /// Half-space normals of the intersection of the corner-vector cone and
    /// the friction pyramid.
    fn build_faces(v: &Matrix3x4<f64>, mu: f64) -> Vec<Vector3<f64>> {
        let mut faces = vec![
            Vector3::new(1.0, 0.0, -mu).normalize(),
            Vector3::new(-1.0, 0.0, -mu).normalize(),
            Vector3::new(0.0, 1.0, -mu).normalize(),
            Vector3::new(0.0, -1.0, -mu).normalize(),
        ];
        // Facets of the generator cone: a pair of generators spans a facet
        // when all remaining generators lie on one side of its plane.
        let cols: Vec<Vector3<f64>> = (0..4).map(|i| v.column(i).into_owned()).collect();
        for i in 0..4 {
            for j in (i + 1)..4 {
                let n = cols[i].cross(&cols[j]);
                if n.norm() < 1e-12 {
                    continue;
                }
                let n = n.normalize();
                let others: Vec<f64> = (0..4)
                    .filter(|&k| k != i && k != j)
                    .map(|k| n.dot(&cols[k]))
                    .collect();
                if others.iter().all(|&d| d <= 1e-12) {
                    faces.push(n);
                } else if others.iter().all(|&d| d >= -1e-12) {
                    faces.push(-n);
                }
            }
        }
        faces
    }

    /// True when `f` satisfies every face constraint to `PROJECTION_TOL`.
    pub fn contains(&self, f: &Vector3<f64>) -> bool {
        let scale = 1.0 + f.norm();
        self.faces.iter().all(|n| n.dot(f) <= PROJECTION_TOL * scale)
    }

    /// True when `f` satisfies the friction pyramid and unilateral contact.
    pub fn satisfies_friction(&self, f: &Vector3<f64>, tol: f64) -> bool {
        f.z >= -tol && f.x.abs() <= self.mu * f.z + tol && f.y.abs() <= self.mu * f.z + tol
    }
}

/// Result of a force projection.
#[derive(Debug, Clone, Copy)]
pub struct ProjectedForce {
    /// The feasible force `V alpha`.
    pub f: Vector3<f64>,
    /// Nonnegative corner multipliers realizing `f`.
    pub alpha: Vector4<f64>,
    /// True when the desired force had to be moved to the cone.
    pub was_projected: bool,
}

/// Projects a desired force onto the feasible cone: the closest force (in
/// the Euclidean norm) that the foot can transmit without tilting, sliding,
/// or pulling.
pub fn project_force(fd: &Vector3<f64>, cone: &ForceCone) -> ProjectedForce {
    if cone.contains(fd) {
        return ProjectedForce {
            f: *fd,
            alpha: corner_multipliers(&cone.v, fd),
            was_projected: false,
        };
    }

    // The projection lies on a proper face: enumerate facet planes, edge
    // rays (pairwise plane intersections), and the apex.
    let mut best = Vector3::zeros();
    let mut best_d2 = fd.norm_squared();
    let faces = &cone.faces;
    for n in faces {
        let cand = fd - n * n.dot(fd);
        let d2 = (fd - cand).norm_squared();
        if d2 < best_d2 && cone.contains(&cand) {
            best = cand;
            best_d2 = d2;
        }
    }
    for i in 0..faces.len() {
        for j in (i + 1)..faces.len() {
            let dir = faces[i].cross(&faces[j]);
            let len = dir.norm();
            if len < 1e-12 {
                continue;
            }
            // Projection onto the edge line; orientation-free, and the
            // feasibility check keeps only the in-cone ray.
            let dir = dir / len;
            let cand = dir * dir.dot(fd);
            let d2 = (fd - cand).norm_squared();
            if d2 < best_d2 && cone.contains(&cand) {
                best = cand;
                best_d2 = d2;
            }
        }
    }

    ProjectedForce {
        f: best,
        alpha: corner_multipliers(&cone.v, &best),
        was_projected: true,
    }
}

/// Nonnegative least squares `min |V a - f|, a >= 0` by the active-set
/// method of Lawson and Hanson. The target is always inside the generator
/// cone here, so the residual vanishes up to roundoff.
fn corner_multipliers(v: &Matrix3x4<f64>, f: &Vector3<f64>) -> Vector4<f64> {
    let mut alpha = Vector4::zeros();
    let mut passive = [false; 4];
    for _outer in 0..16 {
        let residual = f - v * alpha;
        let w = v.transpose() * residual;
        let mut best: Option<(usize, f64)> = None;
        for j in 0..4 {
            if !passive[j] && w[j] > 1e-12 {
                if best.map_or(true, |(_, bw)| w[j] > bw) {
                    best = Some((j, w[j]));
                }
            }
        }
        let Some((enter, _)) = best else { break };
        passive[enter] = true;

        loop {
            // Least squares over the passive set.
            let idx: Vec<usize> = (0..4).filter(|&j| passive[j]).collect();
            let mut trial = Vector4::zeros();
            if !solve_ls_subset(v, f, &idx, &mut trial) {
                passive[enter] = false;
                break;
            }
            if idx.iter().all(|&j| trial[j] > 0.0) {
                alpha = trial;
                break;
            }
            // Step toward the trial solution until a variable hits zero.
            let mut t = 1.0f64;
            let mut drop = None;
            for &j in &idx {
                if trial[j] <= 0.0 {
                    let tj = alpha[j] / (alpha[j] - trial[j]);
                    if tj < t {
                        t = tj;
                        drop = Some(j);
                    }
                }
            }
            alpha = alpha + (trial - alpha) * t;
            if let Some(j) = drop {
                passive[j] = false;
                alpha[j] = 0.0;
            } else {
                break;
            }
        }
    }
    alpha.map(|a| a.max(0.0))
}

/// Unconstrained least squares restricted to a subset of columns, via the
/// normal equations of the (3 x n) subproblem.
fn solve_ls_subset(
    v: &Matrix3x4<f64>,
    f: &Vector3<f64>,
    idx: &[usize],
    out: &mut Vector4<f64>,
) -> bool {
    use nalgebra::DMatrix;
    let n = idx.len();
    let mut a = DMatrix::zeros(3, n);
    for (c, &j) in idx.iter().enumerate() {
        a.set_column(c, &v.column(j));
    }
    let ata = a.transpose() * &a;
    let atf = a.transpose() * f;
    let Some(sol) = ata.lu().solve(&atf) else {
        return false;
    };
    *out = Vector4::zeros();
    for (c, &j) in idx.iter().enumerate() {
        out[j] = sol[c];
    }
    true
}
