//! Raw tensor kernels: 3D convolution (im2col + GEMM), pooling, trilinear
//! resizing, normalization, activations, reductions, and the loss cores.
//!
//! Everything here is single-threaded with a fixed accumulation order, so
//! repeated runs are bit-for-bit identical.

use crate::data::resample::axis_table;
use ndarray::linalg::general_mat_mul;
use ndarray::{s, ArrayD, ArrayView2, ArrayViewMut2, IxDyn};
use std::cell::RefCell;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv3dCfg {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv3dCfg {
    pub fn same(kernel: usize) -> Self {
        Conv3dCfg {
            kernel,
            stride: 1,
            pad: kernel / 2,
        }
    }

    pub fn out_len(&self, in_len: usize) -> usize {
        (in_len + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_spatial(&self, d: usize, h: usize, w: usize) -> [usize; 3] {
        [self.out_len(d), self.out_len(h), self.out_len(w)]
    }
}

// reusable im2col scratch; single-threaded process, cheap to keep around
thread_local! {
    static COL_BUF: RefCell<Vec<f32>> = const { RefCell::new(Vec::new()) };
}

/// Cap on the im2col scratch (values, not bytes); bounds peak memory on
/// full-size inputs by processing output depth in slabs.
const COL_BUDGET: usize = 12_000_000;

fn slab_depth(k_rows: usize, oh: usize, ow: usize, od: usize) -> usize {
    (COL_BUDGET / (k_rows * oh * ow).max(1)).clamp(1, od)
}

struct ConvDims {
    b: usize,
    ci: usize,
    d: usize,
    h: usize,
    w: usize,
    co: usize,
    od: usize,
    oh: usize,
    ow: usize,
    k_rows: usize,
}

fn conv_dims(x: &ArrayD<f32>, w: &ArrayD<f32>, cfg: &Conv3dCfg) -> ConvDims {
    let xs = x.shape();
    let ws = w.shape();
    assert_eq!(xs.len(), 5, "conv input must be rank 5");
    assert_eq!(ws.len(), 5, "conv weight must be rank 5");
    assert_eq!(xs[1], ws[1], "conv in-channel mismatch");
    assert_eq!(ws[2], cfg.kernel);
    let [od, oh, ow] = cfg.out_spatial(xs[2], xs[3], xs[4]);
    ConvDims {
        b: xs[0],
        ci: xs[1],
        d: xs[2],
        h: xs[3],
        w: xs[4],
        co: ws[0],
        od,
        oh,
        ow,
        k_rows: ws[1] * cfg.kernel * cfg.kernel * cfg.kernel,
    }
}

/// Fill `col` (k_rows x m) with the receptive-field matrix for output depth
/// rows [z0, z1) of batch element `xb` ((Ci,D,H,W) contiguous).
#[allow(clippy::too_many_arguments)]
fn im2col_slab(
    xb: &[f32],
    dm: &ConvDims,
    cfg: &Conv3dCfg,
    z0: usize,
    z1: usize,
    col: &mut [f32],
) {
    let k = cfg.kernel;
    let (s, p) = (cfg.stride, cfg.pad);
    let m = (z1 - z0) * dm.oh * dm.ow;
    for ci in 0..dm.ci {
        let chan = &xb[ci * dm.d * dm.h * dm.w..(ci + 1) * dm.d * dm.h * dm.w];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let r = ((ci * k + kz) * k + ky) * k + kx;
                    let row = &mut col[r * m..(r + 1) * m];
                    for oz in z0..z1 {
                        let iz = (oz * s + kz) as isize - p as isize;
                        let base = (oz - z0) * dm.oh * dm.ow;
                        if iz < 0 || iz >= dm.d as isize {
                            row[base..base + dm.oh * dm.ow].fill(0.0);
                            continue;
                        }
                        let plane = &chan[iz as usize * dm.h * dm.w..(iz as usize + 1) * dm.h * dm.w];
                        for oy in 0..dm.oh {
                            let iy = (oy * s + ky) as isize - p as isize;
                            let seg = &mut row[base + oy * dm.ow..base + (oy + 1) * dm.ow];
                            if iy < 0 || iy >= dm.h as isize {
                                seg.fill(0.0);
                                continue;
                            }
                            let src = &plane[iy as usize * dm.w..(iy as usize + 1) * dm.w];
                            if s == 1 {
                                let off = kx as isize - p as isize;
                                let seg_len = seg.len();
                                let lo = ((-off).max(0) as usize).min(seg_len);
                                let hi = ((dm.w as isize - off).clamp(0, dm.ow as isize)) as usize;
                                seg[..lo].fill(0.0);
                                if hi > lo {
                                    seg[lo..hi].copy_from_slice(
                                        &src[(lo as isize + off) as usize..(hi as isize + off) as usize],
                                    );
                                }
                                if hi < seg_len {
                                    seg[hi.max(lo)..].fill(0.0);
                                }
                            } else {
                                for (ox, out) in seg.iter_mut().enumerate() {
                                    let ix = (ox * s + kx) as isize - p as isize;
                                    *out = if ix < 0 || ix >= dm.w as isize {
                                        0.0
                                    } else {
                                        src[ix as usize]
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add of `col` (k_rows x m) back into the input gradient of batch
/// element `gxb`; exact adjoint of [`im2col_slab`].
#[allow(clippy::too_many_arguments)]
fn col2im_slab(
    gxb: &mut [f32],
    dm: &ConvDims,
    cfg: &Conv3dCfg,
    z0: usize,
    z1: usize,
    col: &[f32],
) {
    let k = cfg.kernel;
    let (s, p) = (cfg.stride, cfg.pad);
    let m = (z1 - z0) * dm.oh * dm.ow;
    for ci in 0..dm.ci {
        let chan = &mut gxb[ci * dm.d * dm.h * dm.w..(ci + 1) * dm.d * dm.h * dm.w];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let r = ((ci * k + kz) * k + ky) * k + kx;
                    let row = &col[r * m..(r + 1) * m];
                    for oz in z0..z1 {
                        let iz = (oz * s + kz) as isize - p as isize;
                        if iz < 0 || iz >= dm.d as isize {
                            continue;
                        }
                        let base = (oz - z0) * dm.oh * dm.ow;
                        let plane =
                            &mut chan[iz as usize * dm.h * dm.w..(iz as usize + 1) * dm.h * dm.w];
                        for oy in 0..dm.oh {
                            let iy = (oy * s + ky) as isize - p as isize;
                            if iy < 0 || iy >= dm.h as isize {
                                continue;
                            }
                            let seg = &row[base + oy * dm.ow..base + (oy + 1) * dm.ow];
                            let dst = &mut plane[iy as usize * dm.w..(iy as usize + 1) * dm.w];
                            if s == 1 {
                                let off = kx as isize - p as isize;
                                let lo = (-off).max(0) as usize;
                                let hi = ((dm.w as isize - off).clamp(0, dm.ow as isize)) as usize;
                                for ox in lo..hi {
                                    dst[(ox as isize + off) as usize] += seg[ox];
                                }
                            } else {
                                for (ox, &g) in seg.iter().enumerate() {
                                    let ix = (ox * s + kx) as isize - p as isize;
                                    if ix >= 0 && ix < dm.w as isize {
                                        dst[ix as usize] += g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv3d_forward(
    x: &ArrayD<f32>,
    w: &ArrayD<f32>,
    bias: Option<&ArrayD<f32>>,
    cfg: &Conv3dCfg,
) -> ArrayD<f32> {
    let dm = conv_dims(x, w, cfg);
    let mut out = ArrayD::zeros(IxDyn(&[dm.b, dm.co, dm.od, dm.oh, dm.ow]));
    let xs = x.as_slice().expect("standard layout");
    let ws = w.as_slice().expect("standard layout");
    let odhw = dm.od * dm.oh * dm.ow;
    let slab = slab_depth(dm.k_rows, dm.oh, dm.ow, dm.od);
    let w2 = ArrayView2::from_shape((dm.co, dm.k_rows), ws).expect("weight reshape");
    {
        let os = out.as_slice_mut().expect("standard layout");
        COL_BUF.with(|buf| {
            let mut col = buf.borrow_mut();
            for b in 0..dm.b {
                let xb = &xs[b * dm.ci * dm.d * dm.h * dm.w..(b + 1) * dm.ci * dm.d * dm.h * dm.w];
                let ob = &mut os[b * dm.co * odhw..(b + 1) * dm.co * odhw];
                let mut out2 =
                    ArrayViewMut2::from_shape((dm.co, odhw), ob).expect("output reshape");
                let mut z0 = 0;
                while z0 < dm.od {
                    let z1 = (z0 + slab).min(dm.od);
                    let m = (z1 - z0) * dm.oh * dm.ow;
                    col.resize(dm.k_rows * m, 0.0);
                    im2col_slab(xb, &dm, cfg, z0, z1, &mut col);
                    let col2 = ArrayView2::from_shape((dm.k_rows, m), &col[..dm.k_rows * m])
                        .expect("col reshape");
                    let mut dst = out2.slice_mut(s![.., z0 * dm.oh * dm.ow..z1 * dm.oh * dm.ow]);
                    general_mat_mul(1.0, &w2, &col2, 0.0, &mut dst);
                    z0 = z1;
                }
            }
        });
    }
    if let Some(bias) = bias {
        let bs = bias.as_slice().expect("standard layout");
        let os = out.as_slice_mut().expect("standard layout");
        for b in 0..dm.b {
            for (co, &bv) in bs.iter().enumerate() {
                let at = (b * dm.co + co) * odhw;
                for v in &mut os[at..at + odhw] {
                    *v += bv;
                }
            }
        }
    }
    out
}

pub fn conv3d_backward_input(
    grad_out: &ArrayD<f32>,
    w: &ArrayD<f32>,
    x_dims: &[usize],
    cfg: &Conv3dCfg,
) -> ArrayD<f32> {
    let ws_shape = w.shape();
    let dm = ConvDims {
        b: x_dims[0],
        ci: x_dims[1],
        d: x_dims[2],
        h: x_dims[3],
        w: x_dims[4],
        co: ws_shape[0],
        od: grad_out.shape()[2],
        oh: grad_out.shape()[3],
        ow: grad_out.shape()[4],
        k_rows: ws_shape[1] * cfg.kernel * cfg.kernel * cfg.kernel,
    };
    let mut grad_x = ArrayD::zeros(IxDyn(x_dims));
    let gos = grad_out.as_slice().expect("standard layout");
    let ws = w.as_slice().expect("standard layout");
    let odhw = dm.od * dm.oh * dm.ow;
    let slab = slab_depth(dm.k_rows, dm.oh, dm.ow, dm.od);
    let w2 = ArrayView2::from_shape((dm.co, dm.k_rows), ws).expect("weight reshape");
    let gxs = grad_x.as_slice_mut().expect("standard layout");
    COL_BUF.with(|buf| {
        let mut col = buf.borrow_mut();
        for b in 0..dm.b {
            let gob = &gos[b * dm.co * odhw..(b + 1) * dm.co * odhw];
            let go2 = ArrayView2::from_shape((dm.co, odhw), gob).expect("grad reshape");
            let gxb = &mut gxs[b * dm.ci * dm.d * dm.h * dm.w..(b + 1) * dm.ci * dm.d * dm.h * dm.w];
            let mut z0 = 0;
            while z0 < dm.od {
                let z1 = (z0 + slab).min(dm.od);
                let m = (z1 - z0) * dm.oh * dm.ow;
                col.resize(dm.k_rows * m, 0.0);
                let mut col2 = ArrayViewMut2::from_shape((dm.k_rows, m), &mut col[..dm.k_rows * m])
                    .expect("col reshape");
                let src = go2.slice(s![.., z0 * dm.oh * dm.ow..z1 * dm.oh * dm.ow]);
                general_mat_mul(1.0, &w2.t(), &src, 0.0, &mut col2);
                col2im_slab(gxb, &dm, cfg, z0, z1, &col[..dm.k_rows * m]);
                z0 = z1;
            }
        }
    });
    grad_x
}

pub fn conv3d_backward_params(
    grad_out: &ArrayD<f32>,
    x: &ArrayD<f32>,
    cfg: &Conv3dCfg,
    grad_w: &mut ArrayD<f32>,
    mut grad_b: Option<&mut ArrayD<f32>>,
) {
    let dm = conv_dims(x, grad_w, cfg);
    let xs = x.as_slice().expect("standard layout");
    let gos = grad_out.as_slice().expect("standard layout");
    let odhw = dm.od * dm.oh * dm.ow;
    let slab = slab_depth(dm.k_rows, dm.oh, dm.ow, dm.od);
    {
        let gws = grad_w.as_slice_mut().expect("standard layout");
        let mut gw2 = ArrayViewMut2::from_shape((dm.co, dm.k_rows), gws).expect("reshape");
        COL_BUF.with(|buf| {
            let mut col = buf.borrow_mut();
            for b in 0..dm.b {
                let xb = &xs[b * dm.ci * dm.d * dm.h * dm.w..(b + 1) * dm.ci * dm.d * dm.h * dm.w];
                let gob = &gos[b * dm.co * odhw..(b + 1) * dm.co * odhw];
                let go2 = ArrayView2::from_shape((dm.co, odhw), gob).expect("reshape");
                let mut z0 = 0;
                while z0 < dm.od {
                    let z1 = (z0 + slab).min(dm.od);
                    let m = (z1 - z0) * dm.oh * dm.ow;
                    col.resize(dm.k_rows * m, 0.0);
                    im2col_slab(xb, &dm, cfg, z0, z1, &mut col);
                    let col2 = ArrayView2::from_shape((dm.k_rows, m), &col[..dm.k_rows * m])
                        .expect("reshape");
                    let src = go2.slice(s![.., z0 * dm.oh * dm.ow..z1 * dm.oh * dm.ow]);
                    general_mat_mul(1.0, &src, &col2.t(), 1.0, &mut gw2);
                    z0 = z1;
                }
            }
        });
    }
    if let Some(gb) = grad_b.as_deref_mut() {
        let gbs = gb.as_slice_mut().expect("standard layout");
        for b in 0..dm.b {
            for (co, acc) in gbs.iter_mut().enumerate() {
                let at = (b * dm.co + co) * odhw;
                let mut sum = 0.0f64;
                for &g in &gos[at..at + odhw] {
                    sum += g as f64;
                }
                *acc += sum as f32;
            }
        }
    }
}

// ---------------- pooling ----------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolCfg {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

pub fn maxpool3d_forward(x: &ArrayD<f32>, cfg: &PoolCfg) -> (ArrayD<f32>, Vec<u32>) {
    let xs = x.shape();
    let (b, c, d, h, w) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
    let ol = |n: usize| (n + 2 * cfg.pad - cfg.kernel) / cfg.stride + 1;
    let (od, oh, ow) = (ol(d), ol(h), ol(w));
    let mut out = ArrayD::zeros(IxDyn(&[b, c, od, oh, ow]));
    let mut argmax = vec![0u32; b * c * od * oh * ow];
    let src = x.as_slice().expect("standard layout");
    let dst = out.as_slice_mut().expect("standard layout");
    let mut oi = 0usize;
    for bi in 0..b {
        for ci in 0..c {
            let chan = &src[(bi * c + ci) * d * h * w..(bi * c + ci + 1) * d * h * w];
            for oz in 0..od {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f32::NEG_INFINITY;
                        let mut best_idx = 0u32;
                        for kz in 0..cfg.kernel {
                            let iz = (oz * cfg.stride + kz) as isize - cfg.pad as isize;
                            if iz < 0 || iz >= d as isize {
                                continue;
                            }
                            for ky in 0..cfg.kernel {
                                let iy = (oy * cfg.stride + ky) as isize - cfg.pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..cfg.kernel {
                                    let ix = (ox * cfg.stride + kx) as isize - cfg.pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let idx = (iz as usize * h + iy as usize) * w + ix as usize;
                                    let v = chan[idx];
                                    if v > best {
                                        best = v;
                                        best_idx = idx as u32;
                                    }
                                }
                            }
                        }
                        dst[oi] = best;
                        argmax[oi] = best_idx;
                        oi += 1;
                    }
                }
            }
        }
    }
    (out, argmax)
}

pub fn maxpool3d_backward(grad_out: &ArrayD<f32>, argmax: &[u32], x_dims: &[usize]) -> ArrayD<f32> {
    let (b, c, d, h, w) = (x_dims[0], x_dims[1], x_dims[2], x_dims[3], x_dims[4]);
    let per_chan = d * h * w;
    let mut grad_x = ArrayD::zeros(IxDyn(x_dims));
    let gx = grad_x.as_slice_mut().expect("standard layout");
    let go = grad_out.as_slice().expect("standard layout");
    let out_per_chan = go.len() / (b * c);
    for bc in 0..b * c {
        let base = bc * per_chan;
        for i in 0..out_per_chan {
            let oi = bc * out_per_chan + i;
            gx[base + argmax[oi] as usize] += go[oi];
        }
    }
    grad_x
}

// ---------------- trilinear resize ----------------

pub fn resize3_forward(x: &ArrayD<f32>, out_spatial: [usize; 3]) -> ArrayD<f32> {
    let xs = x.shape();
    let (b, c, d, h, w) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
    let [od, oh, ow] = out_spatial;
    let tz = axis_table(d, od);
    let ty = axis_table(h, oh);
    let tx = axis_table(w, ow);
    let mut out = ArrayD::zeros(IxDyn(&[b, c, od, oh, ow]));
    let src = x.as_slice().expect("standard layout");
    let dst = out.as_slice_mut().expect("standard layout");
    for bc in 0..b * c {
        let sv = &src[bc * d * h * w..(bc + 1) * d * h * w];
        let dv = &mut dst[bc * od * oh * ow..(bc + 1) * od * oh * ow];
        for (z, &(z0, z1, wz)) in tz.iter().enumerate() {
            for (y, &(y0, y1, wy)) in ty.iter().enumerate() {
                let p00 = &sv[(z0 * h + y0) * w..(z0 * h + y0) * w + w];
                let p01 = &sv[(z0 * h + y1) * w..(z0 * h + y1) * w + w];
                let p10 = &sv[(z1 * h + y0) * w..(z1 * h + y0) * w + w];
                let p11 = &sv[(z1 * h + y1) * w..(z1 * h + y1) * w + w];
                let row = &mut dv[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                for (x_o, &(x0, x1, wx)) in tx.iter().enumerate() {
                    let c00 = p00[x0] + (p00[x1] - p00[x0]) * wx;
                    let c01 = p01[x0] + (p01[x1] - p01[x0]) * wx;
                    let c10 = p10[x0] + (p10[x1] - p10[x0]) * wx;
                    let c11 = p11[x0] + (p11[x1] - p11[x0]) * wx;
                    let c0 = c00 + (c01 - c00) * wy;
                    let c1 = c10 + (c11 - c10) * wy;
                    row[x_o] = c0 + (c1 - c0) * wz;
                }
            }
        }
    }
    out
}

pub fn resize3_backward(grad_out: &ArrayD<f32>, in_spatial: [usize; 3]) -> ArrayD<f32> {
    let gs = grad_out.shape();
    let (b, c, od, oh, ow) = (gs[0], gs[1], gs[2], gs[3], gs[4]);
    let [d, h, w] = in_spatial;
    let tz = axis_table(d, od);
    let ty = axis_table(h, oh);
    let tx = axis_table(w, ow);
    let mut grad_x = ArrayD::zeros(IxDyn(&[b, c, d, h, w]));
    let go = grad_out.as_slice().expect("standard layout");
    let gx = grad_x.as_slice_mut().expect("standard layout");
    for bc in 0..b * c {
        let gv = &go[bc * od * oh * ow..(bc + 1) * od * oh * ow];
        let xv = &mut gx[bc * d * h * w..(bc + 1) * d * h * w];
        for (z, &(z0, z1, wz)) in tz.iter().enumerate() {
            for (y, &(y0, y1, wy)) in ty.iter().enumerate() {
                let row = &gv[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                for (x_o, &(x0, x1, wx)) in tx.iter().enumerate() {
                    let g = row[x_o];
                    let w000 = (1.0 - wz) * (1.0 - wy) * (1.0 - wx);
                    let w001 = (1.0 - wz) * (1.0 - wy) * wx;
                    let w010 = (1.0 - wz) * wy * (1.0 - wx);
                    let w011 = (1.0 - wz) * wy * wx;
                    let w100 = wz * (1.0 - wy) * (1.0 - wx);
                    let w101 = wz * (1.0 - wy) * wx;
                    let w110 = wz * wy * (1.0 - wx);
                    let w111 = wz * wy * wx;
                    xv[(z0 * h + y0) * w + x0] += g * w000;
                    xv[(z0 * h + y0) * w + x1] += g * w001;
                    xv[(z0 * h + y1) * w + x0] += g * w010;
                    xv[(z0 * h + y1) * w + x1] += g * w011;
                    xv[(z1 * h + y0) * w + x0] += g * w100;
                    xv[(z1 * h + y0) * w + x1] += g * w101;
                    xv[(z1 * h + y1) * w + x0] += g * w110;
                    xv[(z1 * h + y1) * w + x1] += g * w111;
                }
            }
        }
    }
    grad_x
}

// ---------------- normalization ----------------

pub struct NormSaved {
    /// per-group mean and 1/sqrt(var+eps); one group per channel for batch
    /// norm, one per (batch, channel) for instance norm
    pub mean: Vec<f32>,
    pub invstd: Vec<f32>,
}

pub const NORM_EPS: f64 = 1e-5;

/// Batch statistics over (B, spatial) per channel; updates running stats
/// in place with `running = momentum * running + (1 - momentum) * batch`.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_forward_train(
    x: &ArrayD<f32>,
    gamma: &ArrayD<f32>,
    beta: &ArrayD<f32>,
    running_mean: &mut ArrayD<f32>,
    running_var: &mut ArrayD<f32>,
    momentum: f64,
) -> (ArrayD<f32>, NormSaved) {
    let xs = x.shape();
    let (b, c) = (xs[0], xs[1]);
    let spatial: usize = xs[2..].iter().product();
    let n = (b * spatial) as f64;
    let src = x.as_slice().expect("standard layout");
    let mut mean = vec![0.0f32; c];
    let mut invstd = vec![0.0f32; c];
    let mut out = ArrayD::zeros(x.raw_dim());
    let dst = out.as_slice_mut().expect("standard layout");
    let g = gamma.as_slice().expect("standard layout");
    let be = beta.as_slice().expect("standard layout");
    let rm = running_mean.as_slice_mut().expect("standard layout");
    let rv = running_var.as_slice_mut().expect("standard layout");
    for ci in 0..c {
        let mut sum = 0.0f64;
        let mut sum_sq = 0.0f64;
        for bi in 0..b {
            let at = (bi * c + ci) * spatial;
            for &v in &src[at..at + spatial] {
                sum += v as f64;
                sum_sq += (v as f64) * (v as f64);
            }
        }
        let mu = sum / n;
        let var = (sum_sq / n - mu * mu).max(0.0);
        let istd = 1.0 / (var + NORM_EPS).sqrt();
        mean[ci] = mu as f32;
        invstd[ci] = istd as f32;
        let unbiased = if n > 1.0 { var * n / (n - 1.0) } else { var };
        rm[ci] = (momentum * rm[ci] as f64 + (1.0 - momentum) * mu) as f32;
        rv[ci] = (momentum * rv[ci] as f64 + (1.0 - momentum) * unbiased) as f32;
        let scale = g[ci] * istd as f32;
        let shift = be[ci] - mean[ci] * scale;
        for bi in 0..b {
            let at = (bi * c + ci) * spatial;
            for (o, &v) in dst[at..at + spatial].iter_mut().zip(&src[at..at + spatial]) {
                *o = v * scale + shift;
            }
        }
    }
    (out, NormSaved { mean, invstd })
}

pub fn batchnorm_forward_eval(
    x: &ArrayD<f32>,
    gamma: &ArrayD<f32>,
    beta: &ArrayD<f32>,
    running_mean: &ArrayD<f32>,
    running_var: &ArrayD<f32>,
) -> ArrayD<f32> {
    let xs = x.shape();
    let (b, c) = (xs[0], xs[1]);
    let spatial: usize = xs[2..].iter().product();
    let src = x.as_slice().expect("standard layout");
    let mut out = ArrayD::zeros(x.raw_dim());
    let dst = out.as_slice_mut().expect("standard layout");
    let g = gamma.as_slice().expect("standard layout");
    let be = beta.as_slice().expect("standard layout");
    let rm = running_mean.as_slice().expect("standard layout");
    let rv = running_var.as_slice().expect("standard layout");
    for ci in 0..c {
        let istd = (1.0 / ((rv[ci] as f64 + NORM_EPS).sqrt())) as f32;
        let scale = g[ci] * istd;
        let shift = be[ci] - rm[ci] * scale;
        for bi in 0..b {
            let at = (bi * c + ci) * spatial;
            for (o, &v) in dst[at..at + spatial].iter_mut().zip(&src[at..at + spatial]) {
                *o = v * scale + shift;
            }
        }
    }
    out
}

/// Standard batch-norm backward from saved batch statistics. Returns grad_x
/// and accumulates parameter gradients.
pub fn batchnorm_backward(
    grad_out: &ArrayD<f32>,
    x: &ArrayD<f32>,
    gamma: &ArrayD<f32>,
    saved: &NormSaved,
    grad_gamma: &mut ArrayD<f32>,
    grad_beta: &mut ArrayD<f32>,
) -> ArrayD<f32> {
    let xs = x.shape();
    let (b, c) = (xs[0], xs[1]);
    let spatial: usize = xs[2..].iter().product();
    let n = (b * spatial) as f64;
    let src = x.as_slice().expect("standard layout");
    let go = grad_out.as_slice().expect("standard layout");
    let g = gamma.as_slice().expect("standard layout");
    let gg = grad_gamma.as_slice_mut().expect("standard layout");
    let gb = grad_beta.as_slice_mut().expect("standard layout");
    let mut grad_x = ArrayD::zeros(x.raw_dim());
    let gx = grad_x.as_slice_mut().expect("standard layout");
    for ci in 0..c {
        let mu = saved.mean[ci];
        let istd = saved.invstd[ci];
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for bi in 0..b {
            let at = (bi * c + ci) * spatial;
            for (&dy, &v) in go[at..at + spatial].iter().zip(&src[at..at + spatial]) {
                let xhat = (v - mu) * istd;
                sum_dy += dy as f64;
                sum_dy_xhat += (dy * xhat) as f64;
            }
        }
        gg[ci] += sum_dy_xhat as f32;
        gb[ci] += sum_dy as f32;
        let mean_dy = (sum_dy / n) as f32;
        let mean_dy_xhat = (sum_dy_xhat / n) as f32;
        let gain = g[ci] * istd;
        for bi in 0..b {
            let at = (bi * c + ci) * spatial;
            for i in at..at + spatial {
                let xhat = (src[i] - mu) * istd;
                gx[i] = gain * (go[i] - mean_dy - xhat * mean_dy_xhat);
            }
        }
    }
    grad_x
}

/// Per-(batch, channel) normalization without affine parameters.
pub fn instancenorm_forward(x: &ArrayD<f32>) -> (ArrayD<f32>, NormSaved) {
    let xs = x.shape();
    let (b, c) = (xs[0], xs[1]);
    let spatial: usize = xs[2..].iter().product();
    let src = x.as_slice().expect("standard layout");
    let mut out = ArrayD::zeros(x.raw_dim());
    let dst = out.as_slice_mut().expect("standard layout");
    let mut mean = vec![0.0f32; b * c];
    let mut invstd = vec![0.0f32; b * c];
    for bc in 0..b * c {
        let at = bc * spatial;
        let mut sum = 0.0f64;
        let mut sum_sq = 0.0f64;
        for &v in &src[at..at + spatial] {
            sum += v as f64;
            sum_sq += (v as f64) * (v as f64);
        }
        let n = spatial as f64;
        let mu = sum / n;
        let var = (sum_sq / n - mu * mu).max(0.0);
        let istd = 1.0 / (var + NORM_EPS).sqrt();
        mean[bc] = mu as f32;
        invstd[bc] = istd as f32;
        for (o, &v) in dst[at..at + spatial].iter_mut().zip(&src[at..at + spatial]) {
            *o = (v - mu as f32) * istd as f32;
        }
    }
    (out, NormSaved { mean, invstd })
}

pub fn instancenorm_backward(
    grad_out: &ArrayD<f32>,
    x: &ArrayD<f32>,
    saved: &NormSaved,
) -> ArrayD<f32> {
    let xs = x.shape();
    let (b, c) = (xs[0], xs[1]);
    let spatial: usize = xs[2..].iter().product();
    let n = spatial as f64;
    let src = x.as_slice().expect("standard layout");
    let go = grad_out.as_slice().expect("standard layout");
    let mut grad_x = ArrayD::zeros(x.raw_dim());
    let gx = grad_x.as_slice_mut().expect("standard layout");
    for bc in 0..b * c {
        let at = bc * spatial;
        let mu = saved.mean[bc];
        let istd = saved.invstd[bc];
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for (&dy, &v) in go[at..at + spatial].iter().zip(&src[at..at + spatial]) {
            let xhat = (v - mu) * istd;
            sum_dy += dy as f64;
            sum_dy_xhat += (dy * xhat) as f64;
        }
        let mean_dy = (sum_dy / n) as f32;
        let mean_dy_xhat = (sum_dy_xhat / n) as f32;
        for i in at..at + spatial {
            let xhat = (src[i] - mu) * istd;
            gx[i] = istd * (go[i] - mean_dy - xhat * mean_dy_xhat);
        }
    }
    grad_x
}

// ---------------- losses ----------------

/// Soft Dice loss core with analytic gradient:
/// `1 - (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps)`.
pub fn soft_dice_f64(p: &[f64], t: &[f64], eps: f64) -> (f64, Vec<f64>) {
    assert_eq!(p.len(), t.len(), "dice operand length mismatch");
    let mut sum_p = 0.0;
    let mut sum_t = 0.0;
    let mut inter = 0.0;
    for (&pi, &ti) in p.iter().zip(t.iter()) {
        sum_p += pi;
        sum_t += ti;
        inter += pi * ti;
    }
    let denom = sum_p + sum_t + eps;
    let num = 2.0 * inter + eps;
    let loss = 1.0 - num / denom;
    let grad = p
        .iter()
        .zip(t.iter())
        .map(|(_, &ti)| -(2.0 * ti * denom - num) / (denom * denom))
        .collect();
    (loss, grad)
}

/// Mean squared deviation from a constant with analytic gradient.
pub fn mse_to_const_f64(x: &[f64], c: f64) -> (f64, Vec<f64>) {
    let n = x.len() as f64;
    let mut sum = 0.0;
    for &v in x {
        sum += (v - c) * (v - c);
    }
    let grad = x.iter().map(|&v| 2.0 * (v - c) / n).collect();
    (sum / n, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn rand_tensor(rng: &mut ChaCha12Rng, dims: &[usize]) -> ArrayD<f32> {
        ArrayD::from_shape_fn(IxDyn(dims), |_| rng.random_range(-1.0..1.0))
    }

    /// Direct convolution reference, no im2col.
    fn conv3d_naive(x: &ArrayD<f32>, w: &ArrayD<f32>, b: Option<&ArrayD<f32>>, cfg: &Conv3dCfg) -> ArrayD<f32> {
        let xs = x.shape();
        let ws = w.shape();
        let [od, oh, ow] = cfg.out_spatial(xs[2], xs[3], xs[4]);
        let mut out = ArrayD::zeros(IxDyn(&[xs[0], ws[0], od, oh, ow]));
        for bi in 0..xs[0] {
            for co in 0..ws[0] {
                for oz in 0..od {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = b.map_or(0.0, |b| b[[co]]);
                            for ci in 0..xs[1] {
                                for kz in 0..cfg.kernel {
                                    for ky in 0..cfg.kernel {
                                        for kx in 0..cfg.kernel {
                                            let iz = (oz * cfg.stride + kz) as isize - cfg.pad as isize;
                                            let iy = (oy * cfg.stride + ky) as isize - cfg.pad as isize;
                                            let ix = (ox * cfg.stride + kx) as isize - cfg.pad as isize;
                                            if iz >= 0 && iy >= 0 && ix >= 0
                                                && (iz as usize) < xs[2]
                                                && (iy as usize) < xs[3]
                                                && (ix as usize) < xs[4]
                                            {
                                                acc += x[[bi, ci, iz as usize, iy as usize, ix as usize]]
                                                    * w[[co, ci, kz, ky, kx]];
                                            }
                                        }
                                    }
                                }
                            }
                            out[[bi, co, oz, oy, ox]] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_forward_matches_naive() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for cfg in [
            Conv3dCfg { kernel: 3, stride: 1, pad: 1 },
            Conv3dCfg { kernel: 1, stride: 1, pad: 0 },
            Conv3dCfg { kernel: 4, stride: 2, pad: 1 },
            Conv3dCfg { kernel: 7, stride: 1, pad: 3 },
            Conv3dCfg { kernel: 7, stride: 2, pad: 3 },
            Conv3dCfg { kernel: 3, stride: 2, pad: 1 },
        ] {
            let x = rand_tensor(&mut rng, &[2, 3, 8, 9, 10]);
            let w = rand_tensor(&mut rng, &[4, 3, cfg.kernel, cfg.kernel, cfg.kernel]);
            let b = rand_tensor(&mut rng, &[4]);
            let got = conv3d_forward(&x, &w, Some(&b), &cfg);
            let want = conv3d_naive(&x, &w, Some(&b), &cfg);
            assert_eq!(got.shape(), want.shape(), "{cfg:?}");
            for (g, e) in got.iter().zip(want.iter()) {
                assert!((g - e).abs() < 1e-4, "{cfg:?}: {g} vs {e}");
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_difference_sum() {
        // check d(sum(out))/dx and d(sum(out))/dw against central differences
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let cfg = Conv3dCfg { kernel: 3, stride: 1, pad: 1 };
        let x = rand_tensor(&mut rng, &[1, 2, 4, 5, 4]);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3, 3]);
        let b = rand_tensor(&mut rng, &[3]);
        let out = conv3d_forward(&x, &w, Some(&b), &cfg);
        let grad_out = ArrayD::from_elem(out.raw_dim(), 1.0f32);
        let gx = conv3d_backward_input(&grad_out, &w, x.shape(), &cfg);
        let mut gw = ArrayD::zeros(w.raw_dim());
        let mut gb = ArrayD::zeros(IxDyn(&[3]));
        conv3d_backward_params(&grad_out, &x, &cfg, &mut gw, Some(&mut gb));
        let f = |x: &ArrayD<f32>, w: &ArrayD<f32>, b: &ArrayD<f32>| -> f64 {
            conv3d_forward(x, w, Some(b), &cfg).iter().map(|&v| v as f64).sum()
        };
        let h = 1e-2f32;
        for idx in [[0usize, 0, 0, 0, 0], [0, 1, 3, 4, 3], [0, 0, 2, 2, 2]] {
            let mut xp = x.clone();
            xp[IxDyn(&idx)] += h;
            let mut xm = x.clone();
            xm[IxDyn(&idx)] -= h;
            let fd = (f(&xp, &w, &b) - f(&xm, &w, &b)) / (2.0 * h as f64);
            let an = gx[IxDyn(&idx)] as f64;
            assert!((fd - an).abs() < 1e-2 * (1.0 + an.abs()), "gx {idx:?}: {fd} vs {an}");
        }
        for idx in [[0usize, 0, 0, 0, 0], [2, 1, 2, 2, 2], [1, 0, 1, 0, 2]] {
            let mut wp = w.clone();
            wp[IxDyn(&idx)] += h;
            let mut wm = w.clone();
            wm[IxDyn(&idx)] -= h;
            let fd = (f(&x, &wp, &b) - f(&x, &wm, &b)) / (2.0 * h as f64);
            let an = gw[IxDyn(&idx)] as f64;
            assert!((fd - an).abs() < 1e-2 * (1.0 + an.abs()), "gw {idx:?}: {fd} vs {an}");
        }
    }

    #[test]
    fn maxpool_forward_and_backward() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let x = rand_tensor(&mut rng, &[1, 2, 4, 4, 4]);
        let cfg = PoolCfg { kernel: 2, stride: 2, pad: 0 };
        let (out, argmax) = maxpool3d_forward(&x, &cfg);
        assert_eq!(out.shape(), &[1, 2, 2, 2, 2]);
        // every output equals the max of its window
        for c in 0..2 {
            let mut m = f32::NEG_INFINITY;
            for z in 0..2 {
                for y in 0..2 {
                    for xx in 0..2 {
                        m = m.max(x[[0, c, z, y, xx]]);
                    }
                }
            }
            assert_eq!(out[[0, c, 0, 0, 0]], m);
        }
        let go = ArrayD::from_elem(out.raw_dim(), 1.0f32);
        let gx = maxpool3d_backward(&go, &argmax, x.shape());
        assert_eq!(gx.iter().filter(|&&v| v != 0.0).count(), out.len());
    }

    #[test]
    fn resize_identity_and_adjoint() {
        let mut rng = ChaCha12Rng::seed_from_u64(19);
        let x = rand_tensor(&mut rng, &[1, 2, 3, 4, 5]);
        let same = resize3_forward(&x, [3, 4, 5]);
        for (a, b) in x.iter().zip(same.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        // adjoint identity: <A x, y> == <x, A^T y>
        let y = rand_tensor(&mut rng, &[1, 2, 6, 8, 10]);
        let ax = resize3_forward(&x, [6, 8, 10]);
        let aty = resize3_backward(&y, [3, 4, 5]);
        let lhs: f64 = ax.iter().zip(y.iter()).map(|(&a, &b)| (a * b) as f64).sum();
        let rhs: f64 = x.iter().zip(aty.iter()).map(|(&a, &b)| (a * b) as f64).sum();
        assert!((lhs - rhs).abs() < 1e-3, "{lhs} vs {rhs}");
    }

    #[test]
    fn batchnorm_train_normalizes_and_roundtrips_gradient() {
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let x = rand_tensor(&mut rng, &[2, 3, 4, 4, 4]);
        let gamma = ArrayD::from_elem(IxDyn(&[3]), 1.0f32);
        let beta = ArrayD::zeros(IxDyn(&[3]));
        let mut rm = ArrayD::zeros(IxDyn(&[3]));
        let mut rv = ArrayD::from_elem(IxDyn(&[3]), 1.0f32);
        let (out, saved) = batchnorm_forward_train(&x, &gamma, &beta, &mut rm, &mut rv, 0.9);
        // per-channel output stats ~ N(0,1)
        for c in 0..3 {
            let mut sum = 0.0f64;
            let mut sum_sq = 0.0f64;
            let mut count = 0;
            for b in 0..2 {
                for z in 0..4 {
                    for y in 0..4 {
                        for xx in 0..4 {
                            let v = out[[b, c, z, y, xx]] as f64;
                            sum += v;
                            sum_sq += v * v;
                            count += 1;
                        }
                    }
                }
            }
            let mu = sum / count as f64;
            let var = sum_sq / count as f64 - mu * mu;
            assert!(mu.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
        // gradient of mean(out * r) for random r, against finite differences
        let r = rand_tensor(&mut rng, &[2, 3, 4, 4, 4]);
        let loss = |x: &ArrayD<f32>| -> f64 {
            let mut rm = ArrayD::zeros(IxDyn(&[3]));
            let mut rv = ArrayD::from_elem(IxDyn(&[3]), 1.0f32);
            let (o, _) = batchnorm_forward_train(x, &gamma, &beta, &mut rm, &mut rv, 0.9);
            o.iter().zip(r.iter()).map(|(&a, &b)| (a * b) as f64).sum()
        };
        let go = r.clone();
        let mut gg = ArrayD::zeros(IxDyn(&[3]));
        let mut gb = ArrayD::zeros(IxDyn(&[3]));
        let gx = batchnorm_backward(&go, &x, &gamma, &saved, &mut gg, &mut gb);
        let h = 1e-2f32;
        for idx in [[0usize, 0, 0, 0, 0], [1, 2, 3, 3, 3], [0, 1, 2, 1, 0]] {
            let mut xp = x.clone();
            xp[IxDyn(&idx)] += h;
            let mut xm = x.clone();
            xm[IxDyn(&idx)] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h as f64);
            let an = gx[IxDyn(&idx)] as f64;
            assert!((fd - an).abs() < 2e-2 * (1.0 + an.abs()), "{idx:?}: {fd} vs {an}");
        }
    }

    #[test]
    fn instancenorm_stats_and_gradient() {
        let mut rng = ChaCha12Rng::seed_from_u64(29);
        let x = rand_tensor(&mut rng, &[2, 2, 3, 3, 3]);
        let (out, saved) = instancenorm_forward(&x);
        let spatial = 27;
        let o = out.as_slice().unwrap();
        for bc in 0..4 {
            let seg = &o[bc * spatial..(bc + 1) * spatial];
            let mu: f64 = seg.iter().map(|&v| v as f64).sum::<f64>() / spatial as f64;
            assert!(mu.abs() < 1e-5);
        }
        let r = rand_tensor(&mut rng, &[2, 2, 3, 3, 3]);
        let loss = |x: &ArrayD<f32>| -> f64 {
            let (o, _) = instancenorm_forward(x);
            o.iter().zip(r.iter()).map(|(&a, &b)| (a * b) as f64).sum()
        };
        let gx = instancenorm_backward(&r, &x, &saved);
        let h = 1e-2f32;
        for idx in [[0usize, 0, 0, 0, 0], [1, 1, 2, 2, 2]] {
            let mut xp = x.clone();
            xp[IxDyn(&idx)] += h;
            let mut xm = x.clone();
            xm[IxDyn(&idx)] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h as f64);
            let an = gx[IxDyn(&idx)] as f64;
            assert!((fd - an).abs() < 2e-2 * (1.0 + an.abs()), "{idx:?}: {fd} vs {an}");
        }
    }

    #[test]
    fn soft_dice_values() {
        // p == t, binary: loss 0 (eps-exact)
        let t = vec![1.0, 0.0, 1.0, 1.0];
        let (loss, _) = soft_dice_f64(&t, &t, 1e-5);
        assert!(loss.abs() < 1e-6);
        // empty prediction against 100 foreground voxels
        let p = vec![0.0; 200];
        let mut t2 = vec![0.0; 200];
        for v in t2.iter_mut().take(100) {
            *v = 1.0;
        }
        let (loss, _) = soft_dice_f64(&p, &t2, 1e-5);
        assert!((loss - (1.0 - 1e-5 / (100.0 + 1e-5))).abs() < 1e-12);
        // two 8-voxel cubes overlapping in 4: 1 - 8/16 = 0.5
        let mut p3 = vec![0.0; 12];
        let mut t3 = vec![0.0; 12];
        for v in p3.iter_mut().take(8) {
            *v = 1.0;
        }
        for v in t3.iter_mut().skip(4) {
            *v = 1.0;
        }
        let (loss, _) = soft_dice_f64(&p3, &t3, 1e-5);
        assert!((loss - 0.5).abs() < 1e-5);
    }

    #[test]
    fn soft_dice_gradient_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let n = 64;
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
        let t: Vec<f64> = (0..n).map(|_| f64::from(rng.random::<bool>())).collect();
        let (_, grad) = soft_dice_f64(&p, &t, 1e-5);
        let h = 1e-4;
        for i in (0..n).step_by(7) {
            let mut pp = p.clone();
            pp[i] += h;
            let mut pm = p.clone();
            pm[i] -= h;
            let fd = (soft_dice_f64(&pp, &t, 1e-5).0 - soft_dice_f64(&pm, &t, 1e-5).0) / (2.0 * h);
            let rel = (fd - grad[i]).abs() / grad[i].abs().max(1e-8);
            assert!(rel < 1e-4, "i={i}: fd {fd} vs analytic {}", grad[i]);
        }
    }
}
