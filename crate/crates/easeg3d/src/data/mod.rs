//! Volume/mask/edge data model: file I/O, normalization, resampling,
//! synthetic phantom generation, and ground-truth edge extraction.

mod edges;
mod io;
mod phantom;
pub(crate) mod resample;

pub use edges::{extract_edge_map, EdgeMode};
pub use io::{load_mask, load_volume, save_mask, save_volume, write_pgm_slice, write_pgm_slices};
pub use phantom::{generate_phantom, PhantomSpec};
pub use resample::{resample, resample_grid_trilinear, resample_mask, ResampleMode};

use crate::error::{Error, Result};
use ndarray::Array3;

/// A 3D scalar intensity grid with voxel spacing in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub values: Array3<f32>,
    /// (s_d, s_h, s_w) in mm per voxel, all > 0.
    pub spacing: [f64; 3],
    /// World-space position of voxel (0,0,0), mm.
    pub origin: [f64; 3],
}

impl Volume {
    pub fn new(values: Array3<f32>, spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        let dims = values.dim();
        if dims.0 == 0 || dims.1 == 0 || dims.2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "volume dims must all be >= 1, got {dims:?}"
            )));
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "spacing components must be finite and > 0, got {spacing:?}"
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("volume intensities".into()));
        }
        Ok(Volume {
            values,
            spacing,
            origin,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        let (d, h, w) = self.values.dim();
        [d, h, w]
    }

    /// Z-score normalization: output has mean 0 and standard deviation 1.
    /// Shape, spacing, and origin are unchanged.
    pub fn normalize(&self) -> Result<Volume> {
        let n = self.values.len() as f64;
        let mut sum = 0.0f64;
        let mut sum_sq = 0.0f64;
        for &v in self.values.iter() {
            sum += v as f64;
            sum_sq += (v as f64) * (v as f64);
        }
        let mean = sum / n;
        let var = (sum_sq / n - mean * mean).max(0.0);
        let first = self.values.iter().next().copied();
        if self.values.iter().all(|&v| Some(v) == first) {
            return Err(Error::DegenerateIntensity);
        }
        let std = var.sqrt();
        if std == 0.0 {
            return Err(Error::DegenerateIntensity);
        }
        let inv = 1.0 / std;
        let values = self.values.mapv(|v| (((v as f64) - mean) * inv) as f32);
        Ok(Volume {
            values,
            spacing: self.spacing,
            origin: self.origin,
        })
    }
}

/// A binary 3D grid aligned to a [`Volume`].
#[derive(Debug, Clone, PartialEq)]
pub struct SegMask {
    pub values: Array3<u8>,
    pub spacing: [f64; 3],
}

impl SegMask {
    pub fn new(values: Array3<u8>, spacing: [f64; 3]) -> Result<Self> {
        if values.iter().any(|&v| v > 1) {
            return Err(Error::InvalidArgument(
                "mask voxels must be 0 or 1".into(),
            ));
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "spacing components must be finite and > 0, got {spacing:?}"
            )));
        }
        Ok(SegMask { values, spacing })
    }

    pub fn dims(&self) -> [usize; 3] {
        let (d, h, w) = self.values.dim();
        [d, h, w]
    }

    pub fn foreground_count(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }
}

/// A binary grid marking mask-boundary voxels; same shape as its source mask.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMap {
    pub values: Array3<u8>,
}

impl EdgeMap {
    pub fn dims(&self) -> [usize; 3] {
        let (d, h, w) = self.values.dim();
        [d, h, w]
    }

    /// Wrap as a mask so it can be written through the mask file format.
    pub fn into_mask(self, spacing: [f64; 3]) -> SegMask {
        SegMask {
            values: self.values,
            spacing,
        }
    }
}
