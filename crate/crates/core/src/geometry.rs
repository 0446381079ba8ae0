//! Rotation representations, rigid poses and the fixed frame-conversion maps
//! used when moving actions between the human and robot coordinate systems.
//!
//! Conventions: radians and meters everywhere, quaternions stored `(w, x, y, z)`
//! with the scalar part kept non-negative.

use nalgebra::{Matrix3, Rotation3, SVD, UnitQuaternion, Vector3};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

const ZERO_QUAT_NORM: f64 = 1e-12;
const SIXD_DEGENERACY: f64 = 1e-9;
const ORTHO_TOL: f64 = 1e-9;
const ROTATION_INPUT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("quaternion norm {0:e} is too small to normalize")]
    ZeroQuaternion(f64),
    #[error("6D orientation columns are degenerate (zero or parallel)")]
    DegenerateSixD,
    #[error("matrix is not a proper rotation (orthonormality error {ortho:e}, det {det})")]
    NotARotation { ortho: f64, det: f64 },
    #[error("frame transform is singular")]
    SingularTransform,
}

/// Unit quaternion with canonical sign.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quaternion {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    /// Normalizes `(w, x, y, z)` and canonicalizes the sign.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Result<Self, GeometryError> {
        quat_normalize([w, x, y, z])
    }

    pub fn identity() -> Self {
        Self::IDENTITY
    }

    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        let n = axis.norm();
        if n < ZERO_QUAT_NORM {
            return Self::IDENTITY;
        }
        let (s, c) = (0.5 * angle).sin_cos();
        let a = axis / n;
        Self::from_raw_unit(c, a.x * s, a.y * s, a.z * s)
    }

    /// Exponential map: the rotation whose axis-angle vector is `v`.
    pub fn from_rotation_vector(v: &Vec3) -> Self {
        Self::from_axis_angle(v, v.norm())
    }

    pub fn from_rotation_matrix(m: &Mat3) -> Self {
        let uq = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*m));
        Self::from_raw_unit(uq.w, uq.i, uq.j, uq.k)
    }

    /// Renormalizes values that are already unit up to rounding.
    fn from_raw_unit(w: f64, x: f64, y: f64, z: f64) -> Self {
        quat_normalize([w, x, y, z]).unwrap_or(Self::IDENTITY)
    }

    pub fn w(&self) -> f64 {
        self.w
    }
    pub fn x(&self) -> f64 {
        self.x
    }
    pub fn y(&self) -> f64 {
        self.y
    }
    pub fn z(&self) -> f64 {
        self.z
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    fn to_nalgebra(self) -> UnitQuaternion<f64> {
        UnitQuaternion::new_unchecked(nalgebra::Quaternion::new(self.w, self.x, self.y, self.z))
    }

    pub fn to_rotation_matrix(&self) -> Mat3 {
        self.to_nalgebra().to_rotation_matrix().into_inner()
    }

    pub fn inverse(&self) -> Self {
        // Conjugate; w is unchanged so the canonical sign survives.
        Quaternion {
            w: self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    /// Hamilton product `self * other` (apply `other` first).
    pub fn mul(&self, other: &Quaternion) -> Quaternion {
        let (a, b) = (self, other);
        Self::from_raw_unit(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        let u = Vec3::new(self.x, self.y, self.z);
        let t = 2.0 * u.cross(v);
        v + self.w * t + u.cross(&t)
    }

    pub fn dot(&self, other: &Quaternion) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    /// Logarithm map: axis times angle, angle in `[0, π]`.
    pub fn to_rotation_vector(&self) -> Vec3 {
        let u = Vec3::new(self.x, self.y, self.z);
        let s = u.norm();
        if s < 1e-15 {
            return 2.0 * u;
        }
        // w >= 0 by canonicalization, so the angle is already in [0, π].
        let angle = 2.0 * s.atan2(self.w);
        u * (angle / s)
    }
}

impl Default for Quaternion {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Serialize for Quaternion {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_array().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Quaternion {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let [w, x, y, z] = <[f64; 4]>::deserialize(d)?;
        Quaternion::new(w, x, y, z).map_err(serde::de::Error::custom)
    }
}

/// Scales `q` to unit norm and flips it into the `w >= 0` half.
///
/// When `w` is exactly zero the first nonzero vector component is made
/// positive so that serialized values stay deterministic.
pub fn quat_normalize(q: [f64; 4]) -> Result<Quaternion, GeometryError> {
    let n = q.iter().map(|c| c * c).sum::<f64>().sqrt();
    if !(n > ZERO_QUAT_NORM) {
        return Err(GeometryError::ZeroQuaternion(n));
    }
    // Already-unit input is left bit-identical so normalization is idempotent.
    let mut c = if (n - 1.0).abs() <= 4.0 * f64::EPSILON {
        q
    } else {
        q.map(|v| v / n)
    };
    let lead = c.iter().copied().find(|v| *v != 0.0).unwrap_or(1.0);
    if c[0] < 0.0 || (c[0] == 0.0 && lead < 0.0) {
        c = c.map(|v| -v);
    }
    Ok(Quaternion {
        w: c[0],
        x: c[1],
        y: c[2],
        z: c[3],
    })
}

/// Minimal rotation angle between two orientations, in `[0, π]`.
pub fn geodesic_distance(q1: &Quaternion, q2: &Quaternion) -> f64 {
    // 4·atan2(|q1 − q2|, |q1 + q2|) after aligning hemispheres: exact zero for
    // equal inputs and well conditioned at small angles.
    let a = q1.to_array();
    let sign = if q1.dot(q2) < 0.0 { -1.0 } else { 1.0 };
    let b = q2.to_array().map(|c| c * sign);
    let diff = (0..4).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt();
    let sum = (0..4).map(|i| (a[i] + b[i]).powi(2)).sum::<f64>().sqrt();
    (4.0 * diff.atan2(sum)).min(std::f64::consts::PI)
}

/// Continuous 6D rotation encoding: the first two columns of a rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SixDOrientation {
    pub a: Vec3,
    pub b: Vec3,
}

impl SixDOrientation {
    pub fn new(a: Vec3, b: Vec3) -> Self {
        Self { a, b }
    }

    pub fn identity() -> Self {
        Self::new(Vec3::x(), Vec3::y())
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(Vec3::new(v[0], v[1], v[2]), Vec3::new(v[3], v[4], v[5]))
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.a.x, self.a.y, self.a.z, self.b.x, self.b.y, self.b.z]
    }

    pub fn from_quaternion(q: &Quaternion) -> Self {
        let m = q.to_rotation_matrix();
        Self::new(m.column(0).into_owned(), m.column(1).into_owned())
    }

    pub fn to_quaternion(&self) -> Result<Quaternion, GeometryError> {
        sixd_to_matrix(self).map(|m| Quaternion::from_rotation_matrix(&m))
    }

    /// Re-orthonormalized representative of the same rotation.
    pub fn canonical(&self) -> Result<Self, GeometryError> {
        sixd_to_matrix(self).and_then(|m| matrix_to_sixd(&m))
    }
}

/// Gram–Schmidt decoding: `a` normalized, `b` orthogonalized against it,
/// third column from the cross product.
pub fn sixd_to_matrix(r: &SixDOrientation) -> Result<Mat3, GeometryError> {
    let na = r.a.norm();
    if !(na > SIXD_DEGENERACY) {
        return Err(GeometryError::DegenerateSixD);
    }
    let c0 = r.a / na;
    let b_perp = r.b - c0 * c0.dot(&r.b);
    let nb = b_perp.norm();
    if !(nb > SIXD_DEGENERACY * r.b.norm().max(1.0)) {
        return Err(GeometryError::DegenerateSixD);
    }
    let c1 = b_perp / nb;
    let c2 = c0.cross(&c1);
    Ok(Mat3::from_columns(&[c0, c1, c2]))
}

pub fn matrix_to_sixd(m: &Mat3) -> Result<SixDOrientation, GeometryError> {
    let ortho = (m.transpose() * m - Mat3::identity()).abs().max();
    let det = m.determinant();
    if !(ortho <= ROTATION_INPUT_TOL) || (det - 1.0).abs() > ROTATION_INPUT_TOL {
        return Err(GeometryError::NotARotation { ortho, det });
    }
    Ok(SixDOrientation::new(
        m.column(0).into_owned(),
        m.column(1).into_owned(),
    ))
}

/// Rigid pose: position in meters plus unit orientation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Pose {
    pub position: Vec3,
    pub orientation: Quaternion,
}

impl Pose {
    pub fn new(position: Vec3, orientation: Quaternion) -> Self {
        Self {
            position,
            orientation,
        }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn from_translation(position: Vec3) -> Self {
        Self::new(position, Quaternion::IDENTITY)
    }

    /// `self ∘ other`: `other` is expressed in the frame of `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.position + self.orientation.rotate(&other.position),
            self.orientation.mul(&other.orientation),
        )
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.orientation.inverse();
        Pose::new(-inv.rotate(&self.position), inv)
    }

    /// Maps a point from this pose's local frame into the parent frame.
    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.position + self.orientation.rotate(p)
    }
}

/// Affine coordinate-system conversion `x ↦ linear·x + translation`.
///
/// Improper (reflecting) linear parts are allowed; orientations are carried
/// through the rotation factor of the polar decomposition, with the
/// reflection absorbed by a point inversion when the determinant is negative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameTransform {
    linear: Mat3,
    translation: Vec3,
    orthogonal: bool,
    rotation: Quaternion,
}

impl FrameTransform {
    pub fn new(linear: Mat3, translation: Vec3) -> Result<Self, GeometryError> {
        let det = linear.determinant();
        if !det.is_finite() || det.abs() < 1e-12 || !translation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::SingularTransform);
        }
        let orthogonal = (linear.transpose() * linear - Mat3::identity()).abs().max() <= ORTHO_TOL;
        let rot = if orthogonal {
            linear * det.signum()
        } else {
            polar_rotation(&linear)
        };
        Ok(Self {
            linear,
            translation,
            orthogonal,
            rotation: Quaternion::from_rotation_matrix(&rot),
        })
    }

    pub fn identity() -> Self {
        Self::from_rotation(Quaternion::IDENTITY)
    }

    pub fn from_rotation(q: Quaternion) -> Self {
        Self {
            linear: q.to_rotation_matrix(),
            translation: Vec3::zeros(),
            orthogonal: true,
            rotation: q,
        }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self {
            translation: t,
            ..Self::identity()
        }
    }

    pub fn with_translation(mut self, t: Vec3) -> Self {
        self.translation = t;
        self
    }

    pub fn linear(&self) -> &Mat3 {
        &self.linear
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn is_orthogonal(&self) -> bool {
        self.orthogonal
    }

    /// Proper rotation factor used for orientations.
    pub fn rotation(&self) -> Quaternion {
        self.rotation
    }

    pub fn inverse(&self) -> Result<Self, GeometryError> {
        let inv = if self.orthogonal {
            self.linear.transpose()
        } else {
            self.linear
                .try_inverse()
                .ok_or(GeometryError::SingularTransform)?
        };
        let translation = -(inv * self.translation);
        let mut out = Self::new(inv, translation)?;
        if self.orthogonal {
            // Keep the inverse exactly consistent with our own rotation factor.
            out.rotation = self.rotation.inverse();
        }
        Ok(out)
    }

    pub fn apply_point(&self, p: &Vec3) -> Vec3 {
        self.linear * p + self.translation
    }

    /// Linear part only, for displacements.
    pub fn apply_vector(&self, v: &Vec3) -> Vec3 {
        self.linear * v
    }

    pub fn to_array(&self) -> [f64; 12] {
        let l = &self.linear;
        let t = &self.translation;
        [
            l[(0, 0)],
            l[(0, 1)],
            l[(0, 2)],
            l[(1, 0)],
            l[(1, 1)],
            l[(1, 2)],
            l[(2, 0)],
            l[(2, 1)],
            l[(2, 2)],
            t.x,
            t.y,
            t.z,
        ]
    }

    pub fn from_array(a: &[f64; 12]) -> Result<Self, GeometryError> {
        let linear = Mat3::new(a[0], a[1], a[2], a[3], a[4], a[5], a[6], a[7], a[8]);
        Self::new(linear, Vec3::new(a[9], a[10], a[11]))
    }
}

impl Serialize for FrameTransform {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_array().serialize(s)
    }
}

impl<'de> Deserialize<'de> for FrameTransform {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let a = <[f64; 12]>::deserialize(d)?;
        FrameTransform::from_array(&a).map_err(serde::de::Error::custom)
    }
}

/// Rotation factor `U` of `m = U·P`, flipped to a proper rotation if needed.
fn polar_rotation(m: &Mat3) -> Mat3 {
    let svd = SVD::new(*m, true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let r = u * vt;
    if r.determinant() < 0.0 {
        -r
    } else {
        r
    }
}

pub fn apply_transform(t: &FrameTransform, p: &Pose) -> Pose {
    Pose::new(
        t.apply_point(&p.position),
        t.rotation().mul(&p.orientation),
    )
}
