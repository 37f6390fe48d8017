//! Grid resampling (trilinear / nearest) for volumes and masks.

use crate::data::{SegMask, Volume};
use crate::error::{Error, Result};
use ndarray::Array3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResampleMode {
    Trilinear,
    Nearest,
}

/// Per-output-index source pair and interpolation weight for one axis,
/// using the half-voxel-centre mapping `src = (dst + 0.5) * in/out - 0.5`
/// clamped to the valid range. At equal lengths this is the identity.
pub(crate) fn axis_table(in_len: usize, out_len: usize) -> Vec<(usize, usize, f32)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, (src - i0 as f64) as f32)
        })
        .collect()
}

pub(crate) fn nearest_axis_table(in_len: usize, out_len: usize) -> Vec<usize> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| (((o as f64 + 0.5) * scale - 0.5).round().clamp(0.0, (in_len - 1) as f64)) as usize)
        .collect()
}

/// Trilinear resample of a scalar grid to `out_dims`.
pub fn resample_grid_trilinear(values: &Array3<f32>, out_dims: [usize; 3]) -> Array3<f32> {
    let (id, ih, iw) = values.dim();
    let [od, oh, ow] = out_dims;
    let tz = axis_table(id, od);
    let ty = axis_table(ih, oh);
    let tx = axis_table(iw, ow);
    let src = values.as_slice().expect("standard layout");
    let mut out = Array3::zeros((od, oh, ow));
    {
        let dst = out.as_slice_mut().expect("standard layout");
        for (z, &(z0, z1, wz)) in tz.iter().enumerate() {
            for (y, &(y0, y1, wy)) in ty.iter().enumerate() {
                let row = &mut dst[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                let p00 = &src[(z0 * ih + y0) * iw..(z0 * ih + y0 + 1) * iw];
                let p01 = &src[(z0 * ih + y1) * iw..(z0 * ih + y1 + 1) * iw];
                let p10 = &src[(z1 * ih + y0) * iw..(z1 * ih + y0 + 1) * iw];
                let p11 = &src[(z1 * ih + y1) * iw..(z1 * ih + y1 + 1) * iw];
                for (x, &(x0, x1, wx)) in tx.iter().enumerate() {
                    let c00 = p00[x0] + (p00[x1] - p00[x0]) * wx;
                    let c01 = p01[x0] + (p01[x1] - p01[x0]) * wx;
                    let c10 = p10[x0] + (p10[x1] - p10[x0]) * wx;
                    let c11 = p11[x0] + (p11[x1] - p11[x0]) * wx;
                    let c0 = c00 + (c01 - c00) * wy;
                    let c1 = c10 + (c11 - c10) * wy;
                    row[x] = c0 + (c1 - c0) * wz;
                }
            }
        }
    }
    out
}

fn resample_grid_nearest(values: &Array3<f32>, out_dims: [usize; 3]) -> Array3<f32> {
    let (id, ih, iw) = values.dim();
    let [od, oh, ow] = out_dims;
    let tz = nearest_axis_table(id, od);
    let ty = nearest_axis_table(ih, oh);
    let tx = nearest_axis_table(iw, ow);
    Array3::from_shape_fn((od, oh, ow), |(z, y, x)| values[[tz[z], ty[y], tx[x]]])
}

fn rescaled_spacing(spacing: [f64; 3], in_dims: [usize; 3], out_dims: [usize; 3]) -> [f64; 3] {
    // physical extent is preserved: new spacing = old spacing * old/new
    [
        spacing[0] * in_dims[0] as f64 / out_dims[0] as f64,
        spacing[1] * in_dims[1] as f64 / out_dims[1] as f64,
        spacing[2] * in_dims[2] as f64 / out_dims[2] as f64,
    ]
}

/// Resample a volume to `target_shape`. Nearest mode preserves the value set
/// and is the right choice for binary grids.
pub fn resample(v: &Volume, target_shape: [usize; 3], mode: ResampleMode) -> Result<Volume> {
    if target_shape.iter().any(|&d| d == 0) {
        return Err(Error::InvalidArgument(format!(
            "target shape components must be >= 1, got {target_shape:?}"
        )));
    }
    let values = match mode {
        ResampleMode::Trilinear => resample_grid_trilinear(&v.values, target_shape),
        ResampleMode::Nearest => resample_grid_nearest(&v.values, target_shape),
    };
    Ok(Volume {
        values,
        spacing: rescaled_spacing(v.spacing, v.dims(), target_shape),
        origin: v.origin,
    })
}

/// Nearest-neighbour resample of a mask; binary in, binary out.
pub fn resample_mask(m: &SegMask, target_shape: [usize; 3]) -> Result<SegMask> {
    if target_shape.iter().any(|&d| d == 0) {
        return Err(Error::InvalidArgument(format!(
            "target shape components must be >= 1, got {target_shape:?}"
        )));
    }
    let (id, ih, iw) = m.values.dim();
    let tz = nearest_axis_table(id, target_shape[0]);
    let ty = nearest_axis_table(ih, target_shape[1]);
    let tx = nearest_axis_table(iw, target_shape[2]);
    let values = Array3::from_shape_fn(
        (target_shape[0], target_shape[1], target_shape[2]),
        |(z, y, x)| m.values[[tz[z], ty[y], tx[x]]],
    );
    Ok(SegMask {
        values,
        spacing: rescaled_spacing(m.spacing, [id, ih, iw], target_shape),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn downsample_to_target_shape() {
        // stand-in for the full-size clinical grid; same 350/448 -> 88/112 ratios
        let values = Array3::from_shape_fn((50, 64, 64), |(d, h, w)| (d + h + w) as f32);
        let v = Volume::new(values, [0.19, 0.18, 0.18], [0.0; 3]).unwrap();
        let out = resample(&v, [88, 112, 112], ResampleMode::Trilinear).unwrap();
        assert_eq!(out.dims(), [88, 112, 112]);
        // extent preserved
        for k in 0..3 {
            let before = v.spacing[k] * v.dims()[k] as f64;
            let after = out.spacing[k] * out.dims()[k] as f64;
            assert!((before - after).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_resample_is_exact() {
        let values = Array3::from_shape_fn((6, 7, 8), |(d, h, w)| (d as f32).sin() + (h * w) as f32 * 0.01);
        let v = Volume::new(values, [1.0; 3], [0.0; 3]).unwrap();
        let out = resample(&v, [6, 7, 8], ResampleMode::Trilinear).unwrap();
        for (a, b) in v.values.iter().zip(out.values.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn nearest_preserves_binary_values() {
        let values = Array3::from_shape_fn((8, 8, 8), |(d, h, w)| ((d + h + w) % 2) as f32);
        let v = Volume::new(values, [1.0; 3], [0.0; 3]).unwrap();
        let out = resample(&v, [4, 4, 4], ResampleMode::Nearest).unwrap();
        assert!(out.values.iter().all(|&x| x == 0.0 || x == 1.0));
    }

    #[test]
    fn zero_target_dim_is_rejected() {
        let v = Volume::new(Array3::zeros((4, 4, 4)), [1.0; 3], [0.0; 3]).unwrap();
        assert!(resample(&v, [0, 4, 4], ResampleMode::Trilinear).is_err());
    }
}
