//! Ground-truth edge-map extraction from binary masks.

use crate::data::{EdgeMap, SegMask};
use ndarray::{Array2, Array3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EdgeMode {
    /// Morphological inner boundary: a foreground voxel with at least one
    /// background voxel among its six face neighbours. Deterministic and
    /// parameter-free on binary grids; this is the canonical mode.
    #[default]
    Boundary,
    /// Slice-wise Canny along the depth axis (fixed thresholds 0.1/0.3 of
    /// the normalized gradient range), restricted to foreground voxels.
    CannySlices,
}

/// Extract the edge map of a binary mask.
pub fn extract_edge_map(m: &SegMask, mode: EdgeMode) -> EdgeMap {
    match mode {
        EdgeMode::Boundary => boundary_edges(m),
        EdgeMode::CannySlices => canny_slice_edges(m),
    }
}

fn boundary_edges(m: &SegMask) -> EdgeMap {
    let (d, h, w) = m.values.dim();
    let v = &m.values;
    let mut out = Array3::zeros((d, h, w));
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if v[[z, y, x]] == 0 {
                    continue;
                }
                let at_face = z == 0 || z == d - 1 || y == 0 || y == h - 1 || x == 0 || x == w - 1;
                let exposed = at_face
                    || v[[z - 1, y, x]] == 0
                    || v[[z + 1, y, x]] == 0
                    || v[[z, y - 1, x]] == 0
                    || v[[z, y + 1, x]] == 0
                    || v[[z, y, x - 1]] == 0
                    || v[[z, y, x + 1]] == 0;
                if exposed {
                    out[[z, y, x]] = 1;
                }
            }
        }
    }
    EdgeMap { values: out }
}

const CANNY_SIGMA: f64 = 1.0;
const CANNY_LOW: f32 = 0.1;
const CANNY_HIGH: f32 = 0.3;

fn canny_slice_edges(m: &SegMask) -> EdgeMap {
    let (d, h, w) = m.values.dim();
    let mut out = Array3::zeros((d, h, w));
    for z in 0..d {
        let slice = Array2::from_shape_fn((h, w), |(y, x)| m.values[[z, y, x]] as f32);
        let edges = canny_2d(&slice);
        for y in 0..h {
            for x in 0..w {
                // restrict to mask foreground so the edge map stays a
                // subset of the object
                if edges[[y, x]] && m.values[[z, y, x]] == 1 {
                    out[[z, y, x]] = 1;
                }
            }
        }
    }
    EdgeMap { values: out }
}

fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f32> {
    let mut k: Vec<f32> = (-(radius as i64)..=radius as i64)
        .map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp() as f32)
        .collect();
    let sum: f32 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

fn blur_2d(img: &Array2<f32>, sigma: f64) -> Array2<f32> {
    let radius = 3usize;
    let k = gaussian_kernel(sigma, radius);
    let (h, w) = img.dim();
    let clamp = |v: i64, hi: usize| v.clamp(0, hi as i64 - 1) as usize;
    let mut tmp = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * img[[y, clamp(x as i64 + i as i64 - radius as i64, w)]];
            }
            tmp[[y, x]] = acc;
        }
    }
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * tmp[[clamp(y as i64 + i as i64 - radius as i64, h), x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

/// Minimal Canny on one slice: Gaussian blur, Sobel gradients, non-maximum
/// suppression over quantized directions, double threshold + hysteresis.
fn canny_2d(img: &Array2<f32>) -> Array2<bool> {
    let (h, w) = img.dim();
    let blurred = blur_2d(img, CANNY_SIGMA);
    let at = |y: i64, x: i64| -> f32 {
        blurred[[y.clamp(0, h as i64 - 1) as usize, x.clamp(0, w as i64 - 1) as usize]]
    };
    let mut mag = Array2::zeros((h, w));
    let mut dir = Array2::zeros((h, w));
    let mut max_mag = 0.0f32;
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let gx = at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1)
                - at(y - 1, x - 1)
                - 2.0 * at(y, x - 1)
                - at(y + 1, x - 1);
            let gy = at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1)
                - at(y - 1, x - 1)
                - 2.0 * at(y - 1, x)
                - at(y - 1, x + 1);
            let m = (gx * gx + gy * gy).sqrt();
            mag[[y as usize, x as usize]] = m;
            max_mag = max_mag.max(m);
            // quantize gradient direction to 0/45/90/135 degrees
            let angle = gy.atan2(gx).to_degrees();
            let angle = if angle < 0.0 { angle + 180.0 } else { angle };
            dir[[y as usize, x as usize]] = match angle {
                a if !(22.5..157.5).contains(&a) => 0u8,
                a if a < 67.5 => 1,
                a if a < 112.5 => 2,
                _ => 3,
            };
        }
    }
    if max_mag == 0.0 {
        return Array2::from_elem((h, w), false);
    }
    let lo = CANNY_LOW * max_mag;
    let hi = CANNY_HIGH * max_mag;
    let magc = |y: i64, x: i64| -> f32 {
        if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
            0.0
        } else {
            mag[[y as usize, x as usize]]
        }
    };
    let mut strong = Vec::new();
    let mut weak = Array2::from_elem((h, w), false);
    let mut edges = Array2::from_elem((h, w), false);
    for y in 0..h {
        for x in 0..w {
            let m = mag[[y, x]];
            if m < lo {
                continue;
            }
            let (dy, dx) = match dir[[y, x]] {
                0 => (0i64, 1i64),
                1 => (1, 1),
                2 => (1, 0),
                _ => (1, -1),
            };
            let yy = y as i64;
            let xx = x as i64;
            if m < magc(yy + dy, xx + dx) || m < magc(yy - dy, xx - dx) {
                continue; // suppressed
            }
            if m >= hi {
                strong.push((y, x));
                edges[[y, x]] = true;
            } else {
                weak[[y, x]] = true;
            }
        }
    }
    // hysteresis: grow strong edges through weak neighbours
    while let Some((y, x)) = strong.pop() {
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let ny = y as i64 + dy;
                let nx = x as i64 + dx;
                if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                    continue;
                }
                let (ny, nx) = (ny as usize, nx as usize);
                if weak[[ny, nx]] && !edges[[ny, nx]] {
                    edges[[ny, nx]] = true;
                    strong.push((ny, nx));
                }
            }
        }
    }
    edges
}
