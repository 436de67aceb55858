//! Headerless little-endian float32 volumes (`.f32raw`) with a text sidecar
//! declaring `shape=D,H,W` and optionally `dtype=f32`.

use std::path::{Path, PathBuf};

use crate::{Error, Result, Tensor};

pub fn sidecar_path(raw: impl AsRef<Path>) -> PathBuf {
    raw.as_ref().with_extension("shape")
}

fn parse_sidecar(text: &str, path: &Path) -> Result<[usize; 3]> {
    let bad = |msg: String| Error::InvalidArgument(format!("sidecar {}: {msg}", path.display()));
    let mut shape = None;
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let (key, value) = line.split_once('=').ok_or_else(|| bad(format!("malformed line {line:?}")))?;
        match key.trim() {
            "shape" => {
                let dims: Vec<usize> = value
                    .split(',')
                    .map(|s| s.trim().parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| bad(format!("bad shape {value:?}: {e}")))?;
                let dims: [usize; 3] = dims
                    .try_into()
                    .map_err(|_| bad(format!("shape must have three extents, got {value:?}")))?;
                shape = Some(dims);
            }
            "dtype" if value.trim() == "f32" => {}
            "dtype" => return Err(bad(format!("unsupported dtype {value:?}"))),
            other => return Err(bad(format!("unknown key {other:?}"))),
        }
    }
    shape.ok_or_else(|| bad("missing shape".into()))
}

pub fn read_raw(path: impl AsRef<Path>, sidecar: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let (path, sidecar) = (path.as_ref(), sidecar.as_ref());
    let text = std::fs::read_to_string(sidecar).map_err(|e| Error::io(sidecar, e))?;
    let shape = parse_sidecar(&text, sidecar)?;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = shape.iter().product::<usize>() * 4;
    if bytes.len() != expected {
        return Err(Error::Shape(format!(
            "{}: sidecar declares {shape:?} ({expected} bytes) but file has {} bytes",
            path.display(),
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
        .collect();
    Tensor::new(&shape, data)
}

/// Writes the volume and its sidecar next to it.
pub fn write_raw(path: impl AsRef<Path>, volume: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    let [d, h, w]: [usize; 3] = volume
        .shape()
        .try_into()
        .map_err(|_| Error::Shape(format!("raw: expected a 3D volume, got {:?}", volume.shape())))?;
    let bytes: Vec<u8> = volume.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    std::fs::write(&side, format!("shape={d},{h},{w}\ndtype=f32\n")).map_err(|e| Error::io(&side, e))
}
