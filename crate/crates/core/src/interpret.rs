//! Grad-CAM for the scalar regression head, with orthogonal slice export.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::BrainAgeModel;
use crate::{Error, Real, Result, Tensor};

/// Which activations of a stage Grad-CAM reads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CamTarget {
    /// Max-pool output, before attention modulation.
    PreAttention,
    /// Attention-modulated features.
    #[default]
    PostAttention,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCamMap {
    /// 1-based conv stage.
    pub layer_index: usize,
    /// `[D,H,W]` at input resolution, values in [0,1].
    pub heatmap: Tensor<f32>,
    pub raw_shape: [usize; 3],
}

/// Grad-CAM of stage `layer_index` (1-based) for one `[1,1,D,H,W]` volume.
/// Always runs in evaluation mode.
pub fn gradcam<T: Real>(
    model: &BrainAgeModel<T>,
    volume: &Tensor<T>,
    layer_index: usize,
    target: CamTarget,
) -> Result<GradCamMap> {
    let layers = model.num_conv_layers();
    if !(1..=layers).contains(&layer_index) {
        return Err(Error::InvalidArgument(format!(
            "layer index {layer_index} out of range 1..={layers}"
        )));
    }
    let [n, ..] = volume.dims5("gradcam volume")?;
    if n != 1 {
        return Err(Error::Shape(format!("gradcam takes one volume, got a batch of {n}")));
    }
    let fwd = model.forward(volume, false, 0)?;
    let back = model.backward(&fwd.caches, &Tensor::ones(&[1]))?;
    let stage = &fwd.caches.stages[layer_index - 1];
    let tap = &back.taps[layer_index - 1];
    let (features, grads) = match target {
        CamTarget::PreAttention => (&stage.pre_attention, &tap.d_pre),
        CamTarget::PostAttention => (&stage.post_attention, &tap.d_post),
    };
    let mut map = gradcam_from_maps(features, grads, model.config().input_shape)?;
    map.layer_index = layer_index;
    Ok(map)
}

/// Core Grad-CAM: channel weights are the spatial mean of the gradients,
/// the map is `relu(Σ_c w_c · A_c)`, upsampled trilinearly to `output_shape`
/// and divided by its maximum.
pub fn gradcam_from_maps<T: Real>(features: &Tensor<T>, grads: &Tensor<T>, output_shape: [usize; 3]) -> Result<GradCamMap> {
    let [n, c, d, h, w] = features.dims5("gradcam features")?;
    if n != 1 {
        return Err(Error::Shape(format!("gradcam features must have batch 1, got {n}")));
    }
    grads.expect_shape(features.shape(), "gradcam gradients")?;
    let vol = d * h * w;
    let (fs, gs) = (features.data(), grads.data());
    let mut raw = vec![0.0f64; vol];
    for ci in 0..c {
        let g = &gs[ci * vol..][..vol];
        let weight = g.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / vol as f64;
        if weight == 0.0 {
            continue;
        }
        for (r, f) in raw.iter_mut().zip(&fs[ci * vol..][..vol]) {
            *r += weight * f.to_f64_lossy();
        }
    }
    raw.iter_mut().for_each(|v| *v = v.max(0.0));
    let mut up = upsample_trilinear(&raw, [d, h, w], output_shape);
    let max = up.iter().copied().fold(0.0f64, f64::max);
    if max > 0.0 {
        up.iter_mut().for_each(|v| *v = (*v / max).clamp(0.0, 1.0));
    }
    Ok(GradCamMap {
        layer_index: 0,
        heatmap: Tensor::new(&output_shape, up.into_iter().map(|v| v as f32).collect())?,
        raw_shape: [d, h, w],
    })
}

/// Corner-aligned trilinear resampling: the first and last samples of each
/// axis map onto each other.
pub fn upsample_trilinear(src: &[f64], from: [usize; 3], to: [usize; 3]) -> Vec<f64> {
    let coords = |axis: usize| -> Vec<(usize, usize, f64)> {
        (0..to[axis])
            .map(|o| {
                let pos = if to[axis] <= 1 || from[axis] <= 1 {
                    0.0
                } else {
                    o as f64 * (from[axis] - 1) as f64 / (to[axis] - 1) as f64
                };
                let i0 = (pos.floor() as usize).min(from[axis] - 1);
                let i1 = (i0 + 1).min(from[axis] - 1);
                (i0, i1, pos - i0 as f64)
            })
            .collect()
    };
    let (cz, cy, cx) = (coords(0), coords(1), coords(2));
    let at = |z: usize, y: usize, x: usize| src[(z * from[1] + y) * from[2] + x];
    let mut out = Vec::with_capacity(to.iter().product());
    for &(z0, z1, tz) in &cz {
        for &(y0, y1, ty) in &cy {
            for &(x0, x1, tx) in &cx {
                let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
                let c00 = lerp(at(z0, y0, x0), at(z0, y0, x1), tx);
                let c01 = lerp(at(z0, y1, x0), at(z0, y1, x1), tx);
                let c10 = lerp(at(z1, y0, x0), at(z1, y0, x1), tx);
                let c11 = lerp(at(z1, y1, x0), at(z1, y1, x1), tx);
                out.push(lerp(lerp(c00, c01, ty), lerp(c10, c11, ty), tz));
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Plane {
    /// Fixes the W axis; image rows run along D, columns along H.
    Sagittal,
    /// Fixes the H axis; rows along D, columns along W.
    Coronal,
    /// Fixes the D axis; rows along H, columns along W.
    Axial,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::Sagittal, Plane::Coronal, Plane::Axial];

    pub fn name(self) -> &'static str {
        match self {
            Plane::Sagittal => "sagittal",
            Plane::Coronal => "coronal",
            Plane::Axial => "axial",
        }
    }

    /// Axis of `(D,H,W)` this plane holds fixed.
    pub fn fixed_axis(self) -> usize {
        match self {
            Plane::Sagittal => 2,
            Plane::Coronal => 1,
            Plane::Axial => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SliceImage {
    pub plane: Plane,
    pub index: usize,
    pub width: usize,
    pub height: usize,
    /// Row-major grayscale.
    pub pixels: Vec<u8>,
}

pub fn extract_slice(map: &GradCamMap, plane: Plane, index: usize) -> Result<SliceImage> {
    let [d, h, w]: [usize; 3] = map.heatmap.shape().try_into().map_err(|_| Error::Shape("heatmap must be 3D".into()))?;
    let extent = [d, h, w][plane.fixed_axis()];
    if index >= extent {
        return Err(Error::InvalidArgument(format!(
            "{} slice index {index} out of range 0..{extent}",
            plane.name()
        )));
    }
    let v = map.heatmap.data();
    let at = |z: usize, y: usize, x: usize| v[(z * h + y) * w + x];
    let (rows, cols) = match plane {
        Plane::Sagittal => (d, h),
        Plane::Coronal => (d, w),
        Plane::Axial => (h, w),
    };
    let mut pixels = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let value = match plane {
                Plane::Sagittal => at(r, c, index),
                Plane::Coronal => at(r, index, c),
                Plane::Axial => at(index, r, c),
            };
            pixels.push((255.0 * value.clamp(0.0, 1.0)).round() as u8);
        }
    }
    Ok(SliceImage {
        plane,
        index,
        width: cols,
        height: rows,
        pixels,
    })
}

/// Binary PGM: `P5\n<w> <h>\n255\n` then row-major bytes.
pub fn encode_pgm(image: &SliceImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.pixels);
    out
}

pub fn write_image(image: &SliceImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_pgm(image)).map_err(|e| Error::io(path, e))
}

/// `d,h,w,value` rows for every voxel of the heatmap.
pub fn write_heatmap_csv(map: &GradCamMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let [_, h, w]: [usize; 3] = map.heatmap.shape().try_into().map_err(|_| Error::Shape("heatmap must be 3D".into()))?;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(out, "d,h,w,value").map_err(io)?;
    for (i, v) in map.heatmap.data().iter().enumerate() {
        writeln!(out, "{},{},{},{}", i / (h * w), (i / w) % h, i % w, v).map_err(io)?;
    }
    out.flush().map_err(io)
}
