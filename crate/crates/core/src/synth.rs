//! Synthetic hand corpora built by forward kinematics.
//!
//! Each class is a template of 15 flexion angles (one per flexion triplet)
//! and 5 finger-base azimuths in the palm plane. A hand is realised by
//! placing each finger base at its azimuth in the `xy` plane and bending the
//! finger in the plane spanned by its base direction and the palm normal:
//! a joint with target angle `theta` turns the next bone by `pi - theta`, so
//! the measured flexion angle equals the target exactly. The wrist-pivoted
//! abduction angles are the azimuth differences of adjacent fingers.
//!
//! Per sample, Gaussian noise is added to every bend and azimuth, and an
//! optional random similarity transform is applied to the whole hand.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataio::{DatasetCatalog, Sample};
use crate::error::{Error, Result};
use crate::geometry::{self, HandKeypoints, SimilarityTransform, NUM_FLEXION_TRIPLETS, NUM_KEYPOINTS};
use crate::npy;
use crate::rng::{self, Rng};

/// Wrist-to-base length per finger (thumb, index, middle, ring, pinky).
const BASE_LENGTH: [f64; 5] = [0.45, 0.95, 0.92, 0.86, 0.80];
/// Phalanx lengths per finger, base to tip.
const PHALANX_LENGTH: [[f64; 3]; 5] = [
    [0.38, 0.30, 0.25],
    [0.45, 0.27, 0.22],
    [0.50, 0.30, 0.24],
    [0.46, 0.28, 0.23],
    [0.36, 0.22, 0.20],
];
/// Nominal finger-base azimuths (radians from +y towards +x) and the
/// half-width of the per-class jitter around them.
const AZIMUTH_CENTER: [f64; 5] = [0.95, 0.28, 0.0, -0.24, -0.48];
const AZIMUTH_JITTER: [f64; 5] = [0.20, 0.10, 0.06, 0.08, 0.10];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum TransformRegime {
    /// Canonical pose: wrist at the origin, palm in the `xy` plane.
    None,
    /// Uniform rotation, scale log-uniform in `[0.5, 2]`, translation in `[-1, 1]^3`.
    Mild,
    /// Uniform rotation, scale log-uniform in `[0.1, 10]`, translation in `[-10, 10]^3`.
    Full,
}

impl TransformRegime {
    pub fn sample(self, rng: &mut Rng) -> SimilarityTransform {
        match self {
            TransformRegime::None => SimilarityTransform::identity(),
            TransformRegime::Mild => geometry::random_transform_with(rng, 0.5, 2.0, 1.0),
            TransformRegime::Full => geometry::random_transform_with(rng, 0.1, 10.0, 10.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    /// Standard deviation of the per-sample angular noise, radians.
    pub noise: f64,
    pub transforms: TransformRegime,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassTemplate {
    /// Target angle at each flexion triplet, in triplet-table order.
    pub flexion: [f64; NUM_FLEXION_TRIPLETS],
    /// Finger-base azimuths (thumb, index, middle, ring, pinky).
    pub azimuth: [f64; 5],
}

impl ClassTemplate {
    fn random(rng: &mut Rng) -> Self {
        let flexion = std::array::from_fn(|_| PI / 2.0 + (PI / 2.0) * rng::unit_f64(rng));
        let azimuth =
            std::array::from_fn(|f| AZIMUTH_CENTER[f] + AZIMUTH_JITTER[f] * (2.0 * rng::unit_f64(rng) - 1.0));
        Self { flexion, azimuth }
    }

    /// All 20 angles this template realises, in triplet-table order.
    pub fn target_angles(&self) -> [f64; geometry::ANGLE_DIM] {
        let mut out = [0.0; geometry::ANGLE_DIM];
        out[..NUM_FLEXION_TRIPLETS].copy_from_slice(&self.flexion);
        let a = &self.azimuth;
        // (17,0,1), (1,0,5), (5,0,9), (9,0,13), (13,0,17)
        let pairs = [(4, 0), (0, 1), (1, 2), (2, 3), (3, 4)];
        for (k, (f, g)) in pairs.into_iter().enumerate() {
            out[NUM_FLEXION_TRIPLETS + k] = (a[f] - a[g]).abs();
        }
        out
    }

    /// Canonical-pose hand with the given per-joint bend and azimuth
    /// perturbations added.
    pub fn realize(&self, bend_noise: &[f64; NUM_FLEXION_TRIPLETS], azimuth_noise: &[f64; 5]) -> HandKeypoints {
        let normal = Vector3::new(0.0, 0.0, 1.0);
        let mut points = [[0.0; 3]; NUM_KEYPOINTS];
        for f in 0..5 {
            let az = self.azimuth[f] + azimuth_noise[f];
            let dir = Vector3::new(az.sin(), az.cos(), 0.0);
            let mut p = dir * BASE_LENGTH[f];
            let base_index = 1 + 4 * f;
            points[base_index] = p.into();
            let mut cumulative = 0.0;
            for j in 0..3 {
                let target = self.flexion[3 * f + j];
                let bend = ((PI - target) + bend_noise[3 * f + j]).clamp(0.0, PI);
                cumulative += bend;
                let bone = dir * cumulative.cos() - normal * cumulative.sin();
                p += bone * PHALANX_LENGTH[f][j];
                points[base_index + j + 1] = p.into();
            }
        }
        HandKeypoints::new(points).expect("finite by construction")
    }
}

/// `classes` templates drawn from `seed`; a different seed gives a
/// different dictionary.
pub fn class_templates(classes: usize, seed: u64) -> Vec<ClassTemplate> {
    let mut rng = rng::seeded(seed, rng::stream::SYNTH);
    (0..classes).map(|_| ClassTemplate::random(&mut rng)).collect()
}

pub fn class_name(c: usize) -> String {
    format!("class_{c:03}")
}

fn sample_name(i: usize) -> String {
    format!("s{i:05}.npy")
}

pub fn generate(spec: &SynthSpec) -> Result<DatasetCatalog> {
    if spec.classes == 0 || spec.per_class == 0 {
        return Err(Error::Config("synthetic corpus needs positive class and sample counts".into()));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(Error::Config(format!("noise must be a finite non-negative number, got {}", spec.noise)));
    }
    let templates = class_templates(spec.classes, spec.seed);
    // Sample draws use their own stream so templates do not depend on counts.
    let mut rng = rng::seeded(spec.seed, rng::stream::SYNTH + 1000);
    let normal = Normal::new(0.0, spec.noise.max(0.0)).expect("finite sigma");
    let mut samples = Vec::with_capacity(spec.classes * spec.per_class);
    for (c, template) in templates.iter().enumerate() {
        for i in 0..spec.per_class {
            let mut draw = || if spec.noise > 0.0 { normal.sample(&mut rng) } else { 0.0 };
            let bend: [f64; NUM_FLEXION_TRIPLETS] = std::array::from_fn(|_| draw());
            let az: [f64; 5] = std::array::from_fn(|_| draw());
            let hand = template.realize(&bend, &az);
            let transform = spec.transforms.sample(&mut rng);
            samples.push(Sample {
                path: format!("{}/{}", class_name(c), sample_name(i)),
                class_id: c,
                keypoints: geometry::apply_transform(&hand, &transform),
            });
        }
    }
    let classes = (0..spec.classes).map(class_name).collect();
    DatasetCatalog::from_samples(format!("synth-{}", spec.seed), classes, samples)
}

/// Generates the corpus and writes it as `<out>/<class>/<sample>.npy`.
/// Also writes `<out>/templates.json` with the class templates.
pub fn write_tree(spec: &SynthSpec, out: impl AsRef<Path>) -> Result<DatasetCatalog> {
    let out = out.as_ref();
    let catalog = generate(spec)?;
    for class in &catalog.classes {
        let dir = out.join(class);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for s in &catalog.samples {
        npy::write_keypoints(out.join(&s.path), &s.keypoints)?;
    }
    let templates = class_templates(spec.classes, spec.seed);
    let meta = serde_json::json!({ "spec": spec, "templates": templates });
    let path = out.join("templates.json");
    fs::write(&path, serde_json::to_string_pretty(&meta)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(catalog)
}
