//! Rigid-body primitives: rotations, poses, the 6D rotation codec and the
//! increments used by the smoothness losses.
//!
//! Camera coordinates follow the pinhole convention: x right, y down,
//! z forward. All angles are radians.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};

/// Degeneracy threshold for the Gram–Schmidt decode.
pub const DECODE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Se3Error {
    #[error("degenerate 6D rotation: first column norm {norm_a:.3e}, orthogonal residual {residual:.3e}")]
    DegenerateRotation { norm_a: f64, residual: f64 },
    #[error("sequence needs at least {needed} poses, got {got}")]
    SequenceTooShort { needed: usize, got: usize },
    #[error("matrix is not a proper rotation (orthogonality error {ortho:.3e}, det {det})")]
    NotARotation { ortho: f64, det: f64 },
}

/// A proper rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Wraps `m` after checking `mᵀm = I` and `det m = 1` to `tol`.
    pub fn from_matrix(m: Matrix3<f64>, tol: f64) -> Result<Self, Se3Error> {
        let ortho = (m.transpose() * m - Matrix3::identity()).abs().max();
        let det = m.determinant();
        if ortho > tol || (det - 1.0).abs() > tol {
            return Err(Se3Error::NotARotation { ortho, det });
        }
        Ok(Self(m))
    }

    /// Wraps `m` without checking. Callers must guarantee orthonormality.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Self(m)
    }

    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Self {
        let axis = nalgebra::Unit::new_normalize(axis);
        Self(*Rotation3::from_axis_angle(&axis, angle).matrix())
    }

    pub fn from_quaternion(q: &UnitQuaternion<f64>) -> Self {
        Self(*q.to_rotation_matrix().matrix())
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn compose(&self, other: &Rotation) -> Self {
        Self(self.0 * other.0)
    }

    pub fn apply(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    /// Largest element of `|mᵀm − I|`.
    pub fn orthonormality_error(&self) -> f64 {
        (self.0.transpose() * self.0 - Matrix3::identity()).abs().max()
    }

    /// Column-major 3×3 entries (c1, c2, c3).
    pub fn to_cols_array(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)], m[(1, 0)], m[(2, 0)],
            m[(0, 1)], m[(1, 1)], m[(2, 1)],
            m[(0, 2)], m[(1, 2)], m[(2, 2)],
        ]
    }
}

/// First two columns of a rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rot6D {
    pub a: Vector3<f64>,
    pub b: Vector3<f64>,
}

impl Rot6D {
    pub fn to_array(&self) -> [f64; 6] {
        [self.a.x, self.a.y, self.a.z, self.b.x, self.b.y, self.b.z]
    }

    pub fn from_slice(s: &[f64]) -> Self {
        Self {
            a: Vector3::new(s[0], s[1], s[2]),
            b: Vector3::new(s[3], s[4], s[5]),
        }
    }
}

pub fn rot6d_encode(r: &Rotation) -> Rot6D {
    Rot6D {
        a: r.0.column(0).into_owned(),
        b: r.0.column(1).into_owned(),
    }
}

/// Gram–Schmidt decode. Rejects inputs whose first column vanishes or
/// whose columns are parallel below [`DECODE_EPS`].
pub fn rot6d_decode(r: &Rot6D) -> Result<Rotation, Se3Error> {
    let norm_a = r.a.norm();
    if !(norm_a > DECODE_EPS) {
        return Err(Se3Error::DegenerateRotation { norm_a, residual: f64::NAN });
    }
    let c1 = r.a / norm_a;
    let ortho = r.b - c1 * c1.dot(&r.b);
    let residual = ortho.norm();
    if !(residual > DECODE_EPS) {
        return Err(Se3Error::DegenerateRotation { norm_a, residual });
    }
    let c2 = ortho / residual;
    let c3 = c1.cross(&c2);
    Ok(Rotation(Matrix3::from_columns(&[c1, c2, c3])))
}

/// Rotation angle of `R1ᵀR2`, in `[0, π]`.
///
/// Equal to `arccos(clamp((tr(R1ᵀR2) − 1)/2, −1, 1))`, evaluated as
/// `atan2(‖vee(M − Mᵀ)‖/2, (tr M − 1)/2)` so that angles near zero keep
/// full precision instead of the `√ε` floor of `arccos` near 1.
pub fn geodesic_angle(r1: &Rotation, r2: &Rotation) -> f64 {
    let m = r1.0.transpose() * r2.0;
    let cos = ((m.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let w = Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]);
    (w.norm() / 2.0).atan2(cos)
}

/// Rigid transform mapping object coordinates into a camera (or world) frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSE3 {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl PoseSE3 {
    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self::new(Rotation::identity(), Vector3::zeros())
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(Rotation::identity(), t)
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        PoseSE3 {
            rotation: self.rotation.compose(&other.rotation),
            translation: self.rotation.apply(&other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> PoseSE3 {
        let rt = self.rotation.transpose();
        PoseSE3 {
            rotation: rt,
            translation: -rt.apply(&self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.apply(p) + self.translation
    }

    /// `[x, y, z, a1, a2, a3, b1, b2, b3]`: translation followed by the 6D rotation.
    pub fn to_array9(&self) -> [f64; 9] {
        let r6 = rot6d_encode(&self.rotation).to_array();
        let t = &self.translation;
        [t.x, t.y, t.z, r6[0], r6[1], r6[2], r6[3], r6[4], r6[5]]
    }

    pub fn from_array9(v: &[f64; 9]) -> Result<Self, Se3Error> {
        let rotation = rot6d_decode(&Rot6D::from_slice(&v[3..9]))?;
        Ok(Self::new(rotation, Vector3::new(v[0], v[1], v[2])))
    }
}

/// Translation and rotation change between consecutive poses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Increment {
    pub dt: Vector3<f64>,
    pub dr: Rotation,
}

/// `Δt = t_{k+1} − t_k`, `ΔR = R_kᵀ R_{k+1}`.
pub fn pose_increment(p_k: &PoseSE3, p_k1: &PoseSE3) -> Increment {
    Increment {
        dt: p_k1.translation - p_k.translation,
        dr: p_k.rotation.transpose().compose(&p_k1.rotation),
    }
}

/// Inverse of [`pose_increment`]: recovers `p_{k+1}` from `p_k`.
pub fn apply_increment(p_k: &PoseSE3, inc: &Increment) -> PoseSE3 {
    PoseSE3 {
        rotation: p_k.rotation.compose(&inc.dr),
        translation: p_k.translation + inc.dt,
    }
}

pub fn increments(poses: &[PoseSE3]) -> Vec<Increment> {
    poses.windows(2).map(|w| pose_increment(&w[0], &w[1])).collect()
}

/// Second increments of a pose sequence: `Δ²t_k = Δt_{k+1} − Δt_k`,
/// `Δ²R_k = ΔR_kᵀ ΔR_{k+1}`.
pub fn second_difference(poses: &[PoseSE3]) -> Result<Vec<Increment>, Se3Error> {
    if poses.len() < 3 {
        return Err(Se3Error::SequenceTooShort { needed: 3, got: poses.len() });
    }
    Ok(second_difference_of_increments(&increments(poses)))
}

pub fn second_difference_of_increments(incs: &[Increment]) -> Vec<Increment> {
    incs.windows(2)
        .map(|w| Increment {
            dt: w[1].dt - w[0].dt,
            dr: w[0].dr.transpose().compose(&w[1].dr),
        })
        .collect()
}

/// Expresses an object pose observed in camera `t` in the anchor camera
/// frame: `(cam_anchor_to_world)⁻¹ ∘ cam_t_to_world ∘ pose_in_cam_t`.
pub fn reexpress_in_anchor(
    pose_in_cam_t: &PoseSE3,
    cam_t_to_world: &PoseSE3,
    cam_anchor_to_world: &PoseSE3,
) -> PoseSE3 {
    cam_anchor_to_world
        .inverse()
        .compose(&cam_t_to_world.compose(pose_in_cam_t))
}
