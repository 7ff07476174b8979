//! Volumes and their on-disk container format.
//!
//! A volume is a 4-D `[C, D, H, W]` array of voxel values in [0, 1]. On disk a
//! volume is a directory holding `meta.json` ({dims, dtype, voxel_scale}) and
//! `data.raw` (little-endian f32, C-order).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use gfem_autodiff::Arr;
use ndarray::IxDyn;
use serde::{Deserialize, Serialize};

use crate::error::{GfemError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub data: Arr,
}

#[derive(Serialize, Deserialize)]
struct VolumeMeta {
    dims: [usize; 4],
    dtype: String,
    voxel_scale: f64,
}

impl Volume {
    pub fn new(data: Arr) -> Result<Self> {
        if data.ndim() != 4 {
            return Err(GfemError::ShapeMismatch {
                context: "volume must be [C, D, H, W]".into(),
                expected: vec![4],
                actual: data.shape().to_vec(),
            });
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(GfemError::NonFinite {
                part: "volume data".into(),
                value: *bad,
            });
        }
        Ok(Self { data })
    }

    pub fn zeros(c: usize, d: usize, h: usize, w: usize) -> Self {
        Self {
            data: Arr::zeros(IxDyn(&[c, d, h, w])),
        }
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.data.shape();
        (s[0], s[1], s[2], s[3])
    }

    /// The generator's three stride-2 stages need every spatial axis
    /// divisible by 8. Reports the first offending axis by name.
    pub fn validate_for_generator(&self) -> Result<()> {
        let (_, d, h, w) = self.dims();
        for (axis, size) in [("depth", d), ("height", h), ("width", w)] {
            if size == 0 || size % 8 != 0 {
                return Err(GfemError::DimNotDivisible {
                    axis,
                    size,
                    divisor: 8,
                });
            }
        }
        Ok(())
    }

    /// Write the directory container (meta.json + data.raw as f32 LE).
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| GfemError::io(dir.display().to_string(), e))?;
        let (c, d, h, w) = self.dims();
        let meta = VolumeMeta {
            dims: [c, d, h, w],
            dtype: "float32".into(),
            voxel_scale: 1.0,
        };
        let meta_path = dir.join("meta.json");
        let meta_file = fs::File::create(&meta_path)
            .map_err(|e| GfemError::io(meta_path.display().to_string(), e))?;
        serde_json::to_writer_pretty(meta_file, &meta)
            .map_err(|e| GfemError::json(meta_path.display().to_string(), e))?;

        let mut bytes = Vec::with_capacity(self.data.len() * 4);
        for &v in self.data.iter() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let raw_path = dir.join("data.raw");
        let mut raw = fs::File::create(&raw_path)
            .map_err(|e| GfemError::io(raw_path.display().to_string(), e))?;
        raw.write_all(&bytes)
            .map_err(|e| GfemError::io(raw_path.display().to_string(), e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        let meta_file = fs::File::open(&meta_path)
            .map_err(|e| GfemError::io(meta_path.display().to_string(), e))?;
        let meta: VolumeMeta = serde_json::from_reader(meta_file)
            .map_err(|e| GfemError::json(meta_path.display().to_string(), e))?;
        if meta.dtype != "float32" {
            return Err(GfemError::InvalidData(format!(
                "unsupported volume dtype {:?} in {}",
                meta.dtype,
                meta_path.display()
            )));
        }
        let raw_path = dir.join("data.raw");
        let mut raw = fs::File::open(&raw_path)
            .map_err(|e| GfemError::io(raw_path.display().to_string(), e))?;
        let mut bytes = Vec::new();
        raw.read_to_end(&mut bytes)
            .map_err(|e| GfemError::io(raw_path.display().to_string(), e))?;
        let n: usize = meta.dims.iter().product();
        if bytes.len() != n * 4 {
            return Err(GfemError::InvalidData(format!(
                "{}: expected {} bytes for dims {:?}, found {}",
                raw_path.display(),
                n * 4,
                meta.dims,
                bytes.len()
            )));
        }
        let mut data = Vec::with_capacity(n);
        for chunk in bytes.chunks_exact(4) {
            data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
        }
        Ok(Self {
            data: Arr::from_shape_vec(IxDyn(&meta.dims), data).unwrap(),
        })
    }
}
