//! Domain state types: CoM states, apex states, leg commands, and traces.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

/// Which side the stance leg is on. The sign multiplies the lateral hip
/// offset and the lateral leg angle in the foot kinematics, so the same
/// (th1, th2, lh) numbers describe a mirrored step on the other side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    /// Foot offset toward +y.
    PlusY,
    /// Foot offset toward -y.
    MinusY,
}

impl Side {
    pub fn sign(self) -> f64 {
        match self {
            Side::PlusY => 1.0,
            Side::MinusY => -1.0,
        }
    }

    pub fn flip(self) -> Side {
        match self {
            Side::PlusY => Side::MinusY,
            Side::MinusY => Side::PlusY,
        }
    }
}

/// Centre-of-mass state at a point in time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComState {
    /// Position [m].
    pub p: Vector3<f64>,
    /// Velocity [m/s].
    pub v: Vector3<f64>,
    /// Time [s].
    pub t: f64,
}

impl ComState {
    pub fn new(p: Vector3<f64>, v: Vector3<f64>, t: f64) -> Self {
        Self { p, v, t }
    }

    pub fn is_finite(&self) -> bool {
        self.p.iter().chain(self.v.iter()).all(|x| x.is_finite()) && self.t.is_finite()
    }
}

/// Touchdown leg configuration: longitudinal angle, lateral angle, virtual
/// leg length, and the stance side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LegCommand {
    pub th1: f64,
    pub th2: f64,
    pub lh: f64,
    pub sigma: Side,
}

impl LegCommand {
    pub fn new(th1: f64, th2: f64, lh: f64, sigma: Side) -> Self {
        Self {
            th1,
            th2,
            lh,
            sigma,
        }
    }

    /// The (th1, th2, lh) triple as a vector, for gain arithmetic.
    pub fn as_vector(&self) -> Vector3<f64> {
        Vector3::new(self.th1, self.th2, self.lh)
    }

    pub fn from_vector(v: &Vector3<f64>, sigma: Side) -> Self {
        Self::new(v.x, v.y, v.z, sigma)
    }
}

/// Apex state: the Poincare-section coordinate `[vx, vy, h]`. The height is
/// measured above the ground level of the stance the apex leads into.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApexState {
    pub vx: f64,
    pub vy: f64,
    pub h: f64,
}

impl ApexState {
    pub fn new(vx: f64, vy: f64, h: f64) -> Self {
        Self { vx, vy, h }
    }

    pub fn as_vector(&self) -> Vector3<f64> {
        Vector3::new(self.vx, self.vy, self.h)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }

    /// Apex state as seen from the mirrored stance side (lateral velocity
    /// negated).
    pub fn mirrored(&self) -> Self {
        Self::new(self.vx, -self.vy, self.h)
    }
}

/// The leg-switch sign matrix E = diag(1, -1, 1) relating consecutive apex
/// states of a periodic gait.
pub fn leg_switch_matrix() -> Matrix3<f64> {
    Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, 1.0))
}

/// Phase label of a trace sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Flight,
    Stance,
}

/// Hybrid event kinds in chronological order of a normal step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    Touchdown,
    Liftoff,
    Apex,
}

/// A located hybrid event.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseEvent {
    pub kind: EventKind,
    pub state: ComState,
    /// Foot point at the event (held command pose in flight, pinned in stance).
    pub foot: Vector3<f64>,
}

/// One recorded integration sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceSample {
    pub t: f64,
    pub phase: Phase,
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    pub foot: Vector3<f64>,
    /// Leg force on the CoM [N]; zero during flight.
    pub force: Vector3<f64>,
}

/// Time-stamped trace of one or more hybrid phases with its event list.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HybridTrace {
    pub samples: Vec<TraceSample>,
    pub events: Vec<PhaseEvent>,
}

impl HybridTrace {
    pub fn push(&mut self, sample: TraceSample) {
        self.samples.push(sample);
    }

    pub fn event(&self, kind: EventKind) -> Option<&PhaseEvent> {
        self.events.iter().find(|e| e.kind == kind)
    }

    /// Checks that phases alternate and event times strictly increase.
    pub fn is_well_formed(&self) -> bool {
        let times_ok = self
            .events
            .windows(2)
            .all(|w| w[0].state.t < w[1].state.t);
        let phases_ok = self
            .samples
            .windows(2)
            .all(|w| w[0].t <= w[1].t);
        times_ok && phases_ok
    }
}
