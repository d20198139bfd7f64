//! Polarization representations and the rotation algebra of variable
//! wave-plates on the Poincaré sphere.
//!
//! Sign convention: a wave-plate whose fast axis sits at angle `θ` rotates
//! Stokes vectors right-handedly about `(cos 2θ, sin 2θ, 0)` by its
//! retardance. With this choice an H/V-basis plate carries D → R → A → L as
//! its retardance grows, and every other module relies on it.
//!
//! Jones vectors use the Stokes-ordered Pauli basis `σ1 = Z, σ2 = X, σ3 = Y`
//! so that `s_k = ψ† σ_k ψ`, i.e. `s3 = 2 Im(e_H* e_V)`.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fmt;

use nalgebra::{Complex, Matrix2, Matrix3, Rotation3, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type C64 = Complex<f64>;

/// Actuator retardance range of a piezo fiber squeezer.
pub const SQUEEZER_RETARDANCE_LIMIT: f64 = 5.0 * PI;

const UNIT_TOL: f64 = 1e-6;

/// Named polarization states on the Poincaré sphere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Polarization {
    H,
    V,
    D,
    A,
    R,
    L,
}

impl Polarization {
    pub const ALL: [Polarization; 6] = [
        Polarization::H,
        Polarization::V,
        Polarization::D,
        Polarization::A,
        Polarization::R,
        Polarization::L,
    ];

    pub fn vector(self) -> Vector3<f64> {
        match self {
            Polarization::H => Vector3::new(1.0, 0.0, 0.0),
            Polarization::V => Vector3::new(-1.0, 0.0, 0.0),
            Polarization::D => Vector3::new(0.0, 1.0, 0.0),
            Polarization::A => Vector3::new(0.0, -1.0, 0.0),
            Polarization::R => Vector3::new(0.0, 0.0, 1.0),
            Polarization::L => Vector3::new(0.0, 0.0, -1.0),
        }
    }

    pub fn stokes(self) -> StokesState {
        StokesState::from_vector(self.vector(), 0.0)
    }

    pub fn jones(self) -> JonesState {
        JonesState::from_stokes(&self.stokes())
    }

    pub fn basis(self) -> Basis {
        match self {
            Polarization::H | Polarization::V => Basis::HV,
            Polarization::D | Polarization::A => Basis::DA,
            Polarization::R | Polarization::L => Basis::RL,
        }
    }
}

impl fmt::Display for Polarization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

/// One of the three mutually unbiased polarization bases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Basis {
    HV,
    DA,
    RL,
}

impl Basis {
    pub fn axis(self) -> Vector3<f64> {
        match self {
            Basis::HV => Vector3::x(),
            Basis::DA => Vector3::y(),
            Basis::RL => Vector3::z(),
        }
    }

    /// The basis whose axis is parallel (or antiparallel) to `v` within
    /// `tol_rad`, if any.
    pub fn of_axis(v: &Vector3<f64>, tol_rad: f64) -> Option<Basis> {
        let n = v.norm();
        if n == 0.0 {
            return None;
        }
        [Basis::HV, Basis::DA, Basis::RL].into_iter().find(|b| {
            let c = (b.axis().dot(v) / n).abs().min(1.0);
            c.acos() <= tol_rad
        })
    }
}

/// A fully polarized state: unit Stokes vector plus optical power.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StokesState {
    pub s1: f64,
    pub s2: f64,
    pub s3: f64,
    /// Optical power in dBm.
    pub power: f64,
}

impl StokesState {
    /// Validates that `(s1, s2, s3)` is a unit vector (to 1e-6) and
    /// renormalizes it exactly.
    pub fn new(s1: f64, s2: f64, s3: f64, power: f64) -> Result<Self> {
        let v = Vector3::new(s1, s2, s3);
        let n = v.norm();
        if !n.is_finite() || (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::InvalidArgument(format!(
                "Stokes vector norm {n} is not 1"
            )));
        }
        if !power.is_finite() {
            return Err(Error::InvalidArgument("power must be finite".into()));
        }
        Ok(Self::from_vector(v, power))
    }

    /// Normalizes any nonzero vector onto the sphere.
    pub fn from_vector(v: Vector3<f64>, power: f64) -> Self {
        let u = v / v.norm();
        StokesState {
            s1: u.x,
            s2: u.y,
            s3: u.z,
            power,
        }
    }

    pub fn vector(&self) -> Vector3<f64> {
        Vector3::new(self.s1, self.s2, self.s3)
    }

    pub fn rotated(&self, r: &PolRotation) -> StokesState {
        r.apply(self)
    }

    pub fn with_power(mut self, power: f64) -> Self {
        self.power = power;
        self
    }
}

/// Jones vector with the global phase removed: `e_h` is real and
/// non-negative (or `e_v` is, when `e_h` vanishes).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JonesState {
    e_h: C64,
    e_v: C64,
}

impl JonesState {
    pub fn new(e_h: C64, e_v: C64) -> Result<Self> {
        let n = (e_h.norm_sqr() + e_v.norm_sqr()).sqrt();
        if !n.is_finite() || n == 0.0 {
            return Err(Error::InvalidArgument("zero Jones vector".into()));
        }
        let (mut h, mut v) = (e_h / n, e_v / n);
        let reference = if h.norm() > 1e-12 { h } else { v };
        let phase = C64::from_polar(1.0, -reference.arg());
        h *= phase;
        v *= phase;
        Ok(JonesState { e_h: h, e_v: v })
    }

    pub fn e_h(&self) -> C64 {
        self.e_h
    }

    pub fn e_v(&self) -> C64 {
        self.e_v
    }

    pub fn vector(&self) -> Vector2<C64> {
        Vector2::new(self.e_h, self.e_v)
    }

    pub fn to_stokes(&self, power: f64) -> StokesState {
        let hv = self.e_h.conj() * self.e_v;
        let v = Vector3::new(
            self.e_h.norm_sqr() - self.e_v.norm_sqr(),
            2.0 * hv.re,
            2.0 * hv.im,
        );
        StokesState::from_vector(v, power)
    }

    /// Canonical Jones representative of a Stokes state.
    pub fn from_stokes(s: &StokesState) -> JonesState {
        // polar angle from S1, azimuth in the S2-S3 plane
        let c = s.s1.clamp(-1.0, 1.0);
        let half = c.acos() / 2.0;
        let phi = s.s3.atan2(s.s2);
        let h = C64::new(half.cos(), 0.0);
        let v = C64::from_polar(half.sin(), phi);
        JonesState { e_h: h, e_v: v }
    }

    pub fn transformed(&self, u: &Matrix2<C64>) -> JonesState {
        let out = u * self.vector();
        JonesState::new(out.x, out.y).expect("unitary preserves norm")
    }
}

/// A variable wave-plate: fast-axis orientation plus retardance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaveplateElement {
    /// Fast-axis orientation in radians, wrapped to `[0, π)`.
    pub axis_angle: f64,
    /// Retardance in radians.
    pub retardance: f64,
    /// Actuator range; `None` means unbounded (fiber channel elements).
    #[serde(default)]
    pub retardance_limit: Option<f64>,
}

impl WaveplateElement {
    /// A range-limited actuator element.
    pub fn new(axis_angle: f64, retardance: f64, retardance_limit: f64) -> Result<Self> {
        if !(retardance_limit > 0.0) {
            return Err(Error::InvalidArgument(
                "retardance limit must be positive".into(),
            ));
        }
        if !retardance.is_finite() || retardance.abs() > retardance_limit {
            return Err(Error::InvalidArgument(format!(
                "retardance {retardance} exceeds limit {retardance_limit}"
            )));
        }
        Ok(WaveplateElement {
            axis_angle: wrap_axis(axis_angle),
            retardance,
            retardance_limit: Some(retardance_limit),
        })
    }

    /// A squeezer-like actuator with the default `5π` range.
    pub fn squeezer(axis_angle: f64, retardance: f64) -> Result<Self> {
        Self::new(axis_angle, retardance, SQUEEZER_RETARDANCE_LIMIT)
    }

    /// An element without range limit.
    pub fn unbounded(axis_angle: f64, retardance: f64) -> Self {
        WaveplateElement {
            axis_angle: wrap_axis(axis_angle),
            retardance,
            retardance_limit: None,
        }
    }

    pub fn quarter_wave(axis_angle: f64) -> Self {
        Self::unbounded(axis_angle, PI / 2.0)
    }

    pub fn half_wave(axis_angle: f64) -> Self {
        Self::unbounded(axis_angle, PI)
    }

    /// Poincaré-sphere rotation axis of this element.
    pub fn axis(&self) -> Vector3<f64> {
        let t = 2.0 * self.axis_angle;
        Vector3::new(t.cos(), t.sin(), 0.0)
    }

    pub fn with_retardance(mut self, retardance: f64) -> Self {
        self.retardance = retardance;
        self
    }

    pub fn within_limit(&self) -> bool {
        self.retardance_limit
            .is_none_or(|l| self.retardance.abs() <= l)
    }
}

/// Wraps an axis orientation into `[0, π)`.
pub fn wrap_axis(angle: f64) -> f64 {
    let w = angle.rem_euclid(PI);
    if w >= PI {
        0.0
    } else {
        w
    }
}

/// Proper rotation of Stokes space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolRotation(Matrix3<f64>);

impl Default for PolRotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl PolRotation {
    pub fn identity() -> Self {
        PolRotation(Matrix3::identity())
    }

    /// Right-handed rotation about `axis` (need not be normalized) by `angle`.
    pub fn about_axis(axis: &Vector3<f64>, angle: f64) -> Self {
        let n = axis / axis.norm();
        let (s, c) = angle.sin_cos();
        let k = n.cross_matrix();
        PolRotation(Matrix3::identity() + k * s + k * k * (1.0 - c))
    }

    /// Wraps a matrix without checking orthogonality.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        PolRotation(m)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn inverse(&self) -> Self {
        PolRotation(self.0.transpose())
    }

    /// `self` acts first, then `next`.
    pub fn then(&self, next: &PolRotation) -> PolRotation {
        PolRotation(next.0 * self.0)
    }

    pub fn apply(&self, s: &StokesState) -> StokesState {
        StokesState::from_vector(self.0 * s.vector(), s.power)
    }

    pub fn apply_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    /// `‖R Rᵀ − I‖_max ≤ tol` and `|det R − 1| ≤ tol`.
    pub fn is_proper(&self, tol: f64) -> bool {
        let orth = (self.0 * self.0.transpose() - Matrix3::identity()).amax();
        orth <= tol && (self.0.determinant() - 1.0).abs() <= tol
    }

    /// Rotation angle in `[0, π]`.
    pub fn angle(&self) -> f64 {
        ((self.0.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }

    /// Maximum element-wise difference to another rotation.
    pub fn distance(&self, other: &PolRotation) -> f64 {
        (self.0 - other.0).amax()
    }

    /// SU(2) Jones matrix representing this rotation (up to a global sign).
    pub fn to_su2(&self) -> Matrix2<C64> {
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.0));
        let (w, x, y, z) = (q.w, q.i, q.j, q.k);
        let [s1, s2, s3] = pauli_stokes();
        let r = |v: f64| C64::new(v, 0.0);
        Matrix2::identity() * r(w) - (s1 * r(x) + s2 * r(y) + s3 * r(z)) * C64::i()
    }

    /// SO(3) rotation induced on Stokes vectors by an SU(2) Jones matrix.
    pub fn from_su2(u: &Matrix2<C64>) -> PolRotation {
        let paulis = pauli_stokes();
        let mut m = Matrix3::zeros();
        for (j, sj) in paulis.iter().enumerate() {
            let t = u * sj * u.adjoint();
            for (k, sk) in paulis.iter().enumerate() {
                m[(k, j)] = (sk * t).trace().re / 2.0;
            }
        }
        PolRotation(m)
    }
}

/// Pauli matrices in Stokes order (`Z`, `X`, `Y`).
pub fn pauli_stokes() -> [Matrix2<C64>; 3] {
    let o = C64::new(1.0, 0.0);
    let z = C64::default();
    let i = C64::i();
    [
        Matrix2::new(o, z, z, -o),
        Matrix2::new(z, o, o, z),
        Matrix2::new(z, -i, i, z),
    ]
}

/// Rotation produced by a variable wave-plate.
pub fn vwp_rotation(element: &WaveplateElement) -> PolRotation {
    PolRotation::about_axis(&element.axis(), element.retardance)
}

/// Product of rotations in propagation order (the first element acts first).
pub fn compose(rotations: &[PolRotation]) -> Result<PolRotation> {
    let (first, rest) = rotations.split_first().ok_or(Error::EmptyComposition)?;
    Ok(rest.iter().fold(*first, |acc, r| acc.then(r)))
}

/// Power fraction transmitted through an analyzer for polarization `analyzer`.
pub fn project_power(state: &StokesState, analyzer: &StokesState) -> f64 {
    ((1.0 + state.vector().dot(&analyzer.vector())) / 2.0).clamp(0.0, 1.0)
}

/// Angle between two states on the sphere, in `[0, π]`.
pub fn angular_error(a: &StokesState, b: &StokesState) -> f64 {
    angle_between(&a.vector(), &b.vector())
}

pub(crate) fn angle_between(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    // atan2 form keeps precision near 0 and π
    a.cross(b).norm().atan2(a.dot(b))
}

/// Jones vectors of the six cardinal states, for tomography projectors.
pub fn jones_vector(p: Polarization) -> Vector2<C64> {
    let r = FRAC_1_SQRT_2;
    let c = |re: f64, im: f64| C64::new(re, im);
    match p {
        Polarization::H => Vector2::new(c(1.0, 0.0), c(0.0, 0.0)),
        Polarization::V => Vector2::new(c(0.0, 0.0), c(1.0, 0.0)),
        Polarization::D => Vector2::new(c(r, 0.0), c(r, 0.0)),
        Polarization::A => Vector2::new(c(r, 0.0), c(-r, 0.0)),
        Polarization::R => Vector2::new(c(r, 0.0), c(0.0, r)),
        Polarization::L => Vector2::new(c(r, 0.0), c(0.0, -r)),
    }
}
