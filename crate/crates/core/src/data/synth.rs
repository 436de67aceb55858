//! Deterministic aging phantoms.
//!
//! Each phantom is an ellipsoidal head on a zero background: a bright outer
//! "cortical" shell that dims with age, uniform inner tissue, and a central
//! dark "ventricle" ellipsoid that grows with age. Gaussian noise is added to
//! every voxel. Age is sampled uniformly from the configured range.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::VolumeRecord;
use crate::{Error, Result, Tensor};

/// Shell occupies normalized radius `[SHELL_INNER, SHELL_OUTER]`.
pub const SHELL_INNER: f64 = 0.75;
pub const SHELL_OUTER: f64 = 0.95;
pub const TISSUE_INTENSITY: f64 = 0.5;
pub const VENTRICLE_INTENSITY: f64 = 0.1;
pub const MIN_EXTENT: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_subjects: usize,
    pub age_range: (f64, f64),
    pub shape: [usize; 3],
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_subjects: 200,
            age_range: (60.0, 86.0),
            shape: [32, 32, 32],
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.age_range;
        if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo < hi) {
            return Err(Error::Config(format!("age range must satisfy 0 < lo < hi, got {lo}:{hi}")));
        }
        if self.n_subjects < 2 {
            return Err(Error::Config(format!("need at least 2 subjects, got {}", self.n_subjects)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise sigma must be non-negative, got {}", self.noise_sigma)));
        }
        if let Some(&e) = self.shape.iter().find(|&&e| e < MIN_EXTENT) {
            return Err(Error::Config(format!(
                "shape {:?}: extent {e} is too small to hold the phantom shell (minimum {MIN_EXTENT})",
                self.shape
            )));
        }
        Ok(())
    }

    /// Position of `age` within the range, 0 at `lo` and 1 at `hi`.
    fn progress(&self, age: f64) -> f64 {
        let (lo, hi) = self.age_range;
        ((age - lo) / (hi - lo)).clamp(0.0, 1.0)
    }

    pub fn shell_intensity(&self, age: f64) -> f64 {
        1.0 - 0.4 * self.progress(age)
    }

    /// Ventricle semi-axes in voxels, 8% → 20% of each extent.
    pub fn ventricle_semi_axes(&self, age: f64) -> [f64; 3] {
        let frac = 0.08 + 0.12 * self.progress(age);
        self.shape.map(|e| frac * e as f64)
    }
}

/// Noise-free phantom for one age.
pub fn phantom(spec: &SynthSpec, age: f64) -> Tensor<f32> {
    let [d, h, w] = spec.shape;
    let ext = [d, h, w].map(|e| e as f64);
    let center = ext.map(|e| (e - 1.0) / 2.0);
    let semi = spec.ventricle_semi_axes(age);
    let shell = spec.shell_intensity(age);
    Tensor::from_fn(&[d, h, w], |i| {
        let idx = [i / (h * w), (i / w) % h, i % w];
        let mut r2 = 0.0;
        let mut v2 = 0.0;
        for a in 0..3 {
            let off = idx[a] as f64 - center[a];
            r2 += (off / (ext[a] / 2.0)).powi(2);
            v2 += (off / semi[a]).powi(2);
        }
        let r = r2.sqrt();
        let value = if r > SHELL_OUTER {
            0.0
        } else if r >= SHELL_INNER {
            shell
        } else if v2 <= 1.0 {
            VENTRICLE_INTENSITY
        } else {
            TISSUE_INTENSITY
        };
        value as f32
    })
}

pub fn synth_generate(spec: &SynthSpec) -> Result<Vec<VolumeRecord>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let (lo, hi) = spec.age_range;
    let mut records = Vec::with_capacity(spec.n_subjects);
    for i in 0..spec.n_subjects {
        let age = rng.random_range(lo..hi);
        let mut volume = phantom(spec, age);
        if spec.noise_sigma > 0.0 {
            volume
                .data_mut()
                .iter_mut()
                .for_each(|v| *v += noise.sample(&mut rng) as f32);
        }
        records.push(VolumeRecord {
            subject_id: format!("sub-{:04}", i + 1),
            age,
            volume,
        });
    }
    Ok(records)
}
