//! Volume ingestion, cohort manifests, and the synthetic aging phantom.

pub mod manifest;
pub mod nifti;
pub mod normalize;
pub mod raw;
pub mod synth;

use std::collections::HashSet;

use crate::{Error, Result, Tensor};

pub use manifest::{load_dataset, load_manifest, write_manifest, DatasetManifest, ManifestRow, VolumeFormat};
pub use nifti::{decode_nifti, encode_nifti, parse_header, read_nifti, write_nifti, Endian, NiftiDatatype, NiftiError, NiftiHeader, StoredVoxels};
pub use normalize::zscore_normalize;
pub use raw::{read_raw, sidecar_path, write_raw};
pub use synth::{phantom, synth_generate, SynthSpec, SHELL_INNER, SHELL_OUTER, TISSUE_INTENSITY, VENTRICLE_INTENSITY};

/// One subject: an intensity grid `[D,H,W]` and chronological age in years.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeRecord {
    pub subject_id: String,
    pub age: f64,
    pub volume: Tensor<f32>,
}

/// A named cohort whose volumes all share one shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub shape: [usize; 3],
    pub records: Vec<VolumeRecord>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, records: Vec<VolumeRecord>) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| Error::InvalidArgument("dataset has no subjects".into()))?;
        let shape: [usize; 3] = first
            .volume
            .shape()
            .try_into()
            .map_err(|_| Error::Shape(format!("volume {} is not 3D: {:?}", first.subject_id, first.volume.shape())))?;
        let mut seen = HashSet::new();
        for r in &records {
            if r.volume.shape() != shape {
                return Err(Error::Shape(format!(
                    "subject {} has shape {:?}, dataset shape is {shape:?}",
                    r.subject_id,
                    r.volume.shape()
                )));
            }
            if !seen.insert(r.subject_id.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate subject id {}", r.subject_id)));
            }
            if !(r.age.is_finite() && r.age > 0.0) {
                return Err(Error::InvalidArgument(format!("subject {} has invalid age {}", r.subject_id, r.age)));
            }
        }
        Ok(Self {
            name: name.into(),
            shape,
            records,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ages(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.age).collect()
    }

    /// Records at `indices`, in that order.
    pub fn subset(&self, name: impl Into<String>, indices: &[usize]) -> Result<Self> {
        Self::new(name, indices.iter().map(|&i| self.records[i].clone()).collect())
    }

    /// Z-scores every volume in place.
    pub fn normalized(mut self) -> Result<Self> {
        for r in &mut self.records {
            r.volume = zscore_normalize(&r.volume)
                .map_err(|e| Error::InvalidArgument(format!("subject {}: {e}", r.subject_id)))?;
        }
        Ok(self)
    }

    /// Stacks the listed records into a `[N,1,D,H,W]` batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        let [d, h, w] = self.shape;
        let mut data = Vec::with_capacity(indices.len() * d * h * w);
        for &i in indices {
            data.extend_from_slice(self.records[i].volume.data());
        }
        Tensor::new(&[indices.len(), 1, d, h, w], data)
    }
}
