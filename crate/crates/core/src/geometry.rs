//! Hand keypoint geometry.
//!
//! A hand is 21 landmarks in the MediaPipe ordering: wrist at 0, then four
//! keypoints per finger (thumb 1-4, index 5-8, middle 9-12, ring 13-16,
//! pinky 17-20). Three representations are derived from it:
//!
//! * `raw` (63): wrist-centred, divided by the maximum pairwise distance,
//!   flattened row-major.
//! * `angle` (20): inter-joint angles over a fixed triplet table, computed
//!   from the original points. Invariant under rotation, isotropic scale and
//!   translation.
//! * `raw_angle` (83): `raw` followed by `angle`.

use std::fmt;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const NUM_KEYPOINTS: usize = 21;
pub const RAW_DIM: usize = NUM_KEYPOINTS * 3;
pub const ANGLE_DIM: usize = 20;
pub const RAW_ANGLE_DIM: usize = RAW_DIM + ANGLE_DIM;

/// Below this, the hand is treated as a single point.
pub const DEGENERATE_HAND_EPS: f64 = 1e-12;
/// Below this, a displacement vector has no usable direction.
pub const DEGENERATE_BONE_EPS: f64 = 1e-9;

/// 21 x 3 landmark coordinates; row 0 is the wrist.
#[derive(Clone, Copy, PartialEq)]
pub struct HandKeypoints {
    points: [[f64; 3]; NUM_KEYPOINTS],
}

impl fmt::Debug for HandKeypoints {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HandKeypoints")
            .field("wrist", &self.points[0])
            .finish_non_exhaustive()
    }
}

impl HandKeypoints {
    pub fn new(points: [[f64; 3]; NUM_KEYPOINTS]) -> Result<Self> {
        for (i, p) in points.iter().enumerate() {
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidKeypoints(format!(
                    "keypoint {i} has a non-finite coordinate {p:?}"
                )));
            }
        }
        Ok(Self { points })
    }

    /// Builds from a row-major slice of 63 values.
    pub fn from_flat(values: &[f64]) -> Result<Self> {
        if values.len() != RAW_DIM {
            return Err(Error::InvalidKeypoints(format!(
                "expected {RAW_DIM} values, got {}",
                values.len()
            )));
        }
        let mut points = [[0.0; 3]; NUM_KEYPOINTS];
        for (row, chunk) in points.iter_mut().zip(values.chunks_exact(3)) {
            row.copy_from_slice(chunk);
        }
        Self::new(points)
    }

    pub fn points(&self) -> &[[f64; 3]; NUM_KEYPOINTS] {
        &self.points
    }

    pub fn row(&self, i: usize) -> Vector3<f64> {
        Vector3::from(self.points[i])
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.points.iter().flatten().copied().collect()
    }

    fn map_rows(&self, f: impl Fn(Vector3<f64>) -> Vector3<f64>) -> Self {
        let mut points = self.points;
        for row in points.iter_mut() {
            *row = f(Vector3::from(*row)).into();
        }
        Self { points }
    }

    pub fn max_pairwise_distance(&self) -> f64 {
        let mut best = 0.0f64;
        for j in 0..NUM_KEYPOINTS {
            for k in (j + 1)..NUM_KEYPOINTS {
                best = best.max((self.row(j) - self.row(k)).norm());
            }
        }
        best
    }
}

/// (parent, pivot, child) keypoint indices of one inter-joint angle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AngleTriplet {
    pub parent: usize,
    pub pivot: usize,
    pub child: usize,
}

const fn t(parent: usize, pivot: usize, child: usize) -> AngleTriplet {
    AngleTriplet {
        parent,
        pivot,
        child,
    }
}

/// 15 flexion triplets along the finger chains, then 5 wrist-pivoted
/// abduction triplets between cyclically adjacent finger bases.
pub const TRIPLETS: [AngleTriplet; ANGLE_DIM] = [
    // thumb
    t(0, 1, 2),
    t(1, 2, 3),
    t(2, 3, 4),
    // index
    t(0, 5, 6),
    t(5, 6, 7),
    t(6, 7, 8),
    // middle
    t(0, 9, 10),
    t(9, 10, 11),
    t(10, 11, 12),
    // ring
    t(0, 13, 14),
    t(13, 14, 15),
    t(14, 15, 16),
    // pinky
    t(0, 17, 18),
    t(17, 18, 19),
    t(18, 19, 20),
    // abduction at the wrist
    t(17, 0, 1),
    t(1, 0, 5),
    t(5, 0, 9),
    t(9, 0, 13),
    t(13, 0, 17),
];

pub const NUM_FLEXION_TRIPLETS: usize = 15;

pub fn triplet_table() -> &'static [AngleTriplet; ANGLE_DIM] {
    &TRIPLETS
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Raw,
    Angle,
    RawAngle,
}

impl FeatureKind {
    pub fn dim(self) -> usize {
        match self {
            FeatureKind::Raw => RAW_DIM,
            FeatureKind::Angle => ANGLE_DIM,
            FeatureKind::RawAngle => RAW_ANGLE_DIM,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub kind: FeatureKind,
    pub values: Vec<f64>,
    /// Triplet indices whose displacement vectors were too short; their
    /// angle entry is 0.
    pub degenerate_triplets: Vec<usize>,
}

impl FeatureVector {
    pub fn is_degenerate(&self) -> bool {
        !self.degenerate_triplets.is_empty()
    }
}

pub fn wrist_center(h: &HandKeypoints) -> HandKeypoints {
    let wrist = h.row(0);
    h.map_rows(|p| p - wrist)
}

pub fn scale_normalize(h: &HandKeypoints) -> Result<HandKeypoints> {
    let d = h.max_pairwise_distance();
    if d < DEGENERATE_HAND_EPS {
        return Err(Error::DegenerateHand {
            max_distance: d,
            threshold: DEGENERATE_HAND_EPS,
        });
    }
    Ok(h.map_rows(|p| p / d))
}

pub fn raw_features(h: &HandKeypoints) -> Result<FeatureVector> {
    let normalized = scale_normalize(&wrist_center(h))?;
    Ok(FeatureVector {
        kind: FeatureKind::Raw,
        values: normalized.flatten(),
        degenerate_triplets: Vec::new(),
    })
}

/// Angle in `[0, pi]` between `parent - pivot` and `child - pivot`, or
/// `None` if either displacement is shorter than [`DEGENERATE_BONE_EPS`].
///
/// Evaluated as `atan2(|u x v|, u . v)`, which equals `arccos` of the
/// normalised dot product but keeps full precision near `0` and `pi`.
pub fn triplet_angle(h: &HandKeypoints, triplet: &AngleTriplet) -> Option<f64> {
    let pivot = h.row(triplet.pivot);
    let u = h.row(triplet.parent) - pivot;
    let v = h.row(triplet.child) - pivot;
    let (nu, nv) = (u.norm(), v.norm());
    if nu < DEGENERATE_BONE_EPS || nv < DEGENERATE_BONE_EPS {
        return None;
    }
    Some(u.cross(&v).norm().atan2(u.dot(&v)))
}

pub fn joint_angles(h: &HandKeypoints) -> FeatureVector {
    let mut values = Vec::with_capacity(ANGLE_DIM);
    let mut degenerate = Vec::new();
    for (k, triplet) in TRIPLETS.iter().enumerate() {
        match triplet_angle(h, triplet) {
            Some(theta) => values.push(theta),
            None => {
                values.push(0.0);
                degenerate.push(k);
            }
        }
    }
    FeatureVector {
        kind: FeatureKind::Angle,
        values,
        degenerate_triplets: degenerate,
    }
}

pub fn raw_angle_features(h: &HandKeypoints) -> Result<FeatureVector> {
    let raw = raw_features(h)?;
    let angle = joint_angles(h);
    let mut values = raw.values;
    values.extend_from_slice(&angle.values);
    Ok(FeatureVector {
        kind: FeatureKind::RawAngle,
        values,
        degenerate_triplets: angle.degenerate_triplets,
    })
}

pub fn features(h: &HandKeypoints, kind: FeatureKind) -> Result<FeatureVector> {
    match kind {
        FeatureKind::Raw => raw_features(h),
        FeatureKind::Angle => Ok(joint_angles(h)),
        FeatureKind::RawAngle => raw_angle_features(h),
    }
}

/// `p -> scale * rotation * p + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityTransform {
    rotation: Matrix3<f64>,
    scale: f64,
    translation: Vector3<f64>,
}

impl SimilarityTransform {
    pub const ORTHO_TOL: f64 = 1e-10;

    pub fn new(rotation: Matrix3<f64>, scale: f64, translation: Vector3<f64>) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidKeypoints(format!(
                "transform scale must be positive, got {scale}"
            )));
        }
        let ortho_err = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det_err = (rotation.determinant() - 1.0).abs();
        if ortho_err > Self::ORTHO_TOL || det_err > Self::ORTHO_TOL {
            return Err(Error::InvalidKeypoints(format!(
                "rotation is not in SO(3): |R^T R - I| = {ortho_err:e}, |det - 1| = {det_err:e}"
            )));
        }
        Ok(Self {
            rotation,
            scale,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            scale: 1.0,
            translation: Vector3::zeros(),
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn apply_point(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * p) + self.translation
    }

    /// `self` after `first`: `x -> self(first(x))`.
    pub fn after(&self, first: &SimilarityTransform) -> SimilarityTransform {
        SimilarityTransform {
            rotation: self.rotation * first.rotation,
            scale: self.scale * first.scale,
            translation: self.scale * (self.rotation * first.translation) + self.translation,
        }
    }
}

pub fn apply_transform(h: &HandKeypoints, transform: &SimilarityTransform) -> HandKeypoints {
    h.map_rows(|p| transform.apply_point(p))
}

/// Uniform rotation (normalised Gaussian quaternion), log-uniform scale in
/// `[0.1, 10]`, translation uniform in `[-10, 10]^3`.
pub fn random_transform(seed: u64) -> SimilarityTransform {
    let mut rng = rng::seeded(seed, rng::stream::TRANSFORM);
    random_transform_with(&mut rng, 0.1, 10.0, 10.0)
}

pub fn random_transform_with(
    rng: &mut rng::Rng,
    min_scale: f64,
    max_scale: f64,
    max_translation: f64,
) -> SimilarityTransform {
    let rotation = random_rotation(rng);
    let (lo, hi) = (min_scale.ln(), max_scale.ln());
    let scale = (lo + (hi - lo) * rng::unit_f64(rng)).exp().clamp(min_scale, max_scale);
    let translation = Vector3::from_fn(|_, _| max_translation * (2.0 * rng::unit_f64(rng) - 1.0));
    SimilarityTransform {
        rotation,
        scale,
        translation,
    }
}

pub fn random_rotation(rng: &mut rng::Rng) -> Matrix3<f64> {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-6 {
            let unit = UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]));
            return unit.to_rotation_matrix().into_inner();
        }
    }
}

/// Angle between two directions in `[0, pi]` via the clamped `arccos` of
/// the normalised dot product; used by fixtures as an independent formula.
pub fn angle_between(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    (a.dot(b) / (a.norm() * b.norm())).clamp(-1.0, 1.0).acos()
}
