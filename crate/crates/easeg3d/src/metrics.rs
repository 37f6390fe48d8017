//! Overlap and distance metrics for binary volumes: Dice, Jaccard,
//! Hausdorff distance (spacing-aware), precision, recall, and per-case
//! report aggregation with CSV output.

use crate::data::SegMask;
use crate::error::{Error, Result};
use ndarray::Array3;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub case_id: String,
    pub dice: f64,
    pub jaccard: f64,
    pub hd_mm: f64,
    pub precision: f64,
    pub recall: f64,
}

struct Overlap {
    p: usize,
    g: usize,
    inter: usize,
}

fn overlap(pred: &SegMask, gt: &SegMask) -> Result<Overlap> {
    if pred.dims() != gt.dims() {
        return Err(Error::shape("mask pair", &gt.dims(), &pred.dims()));
    }
    let mut o = Overlap { p: 0, g: 0, inter: 0 };
    for (&a, &b) in pred.values.iter().zip(gt.values.iter()) {
        o.p += a as usize;
        o.g += b as usize;
        o.inter += (a & b) as usize;
    }
    Ok(o)
}

/// Dice similarity: 2|P∩G| / (|P| + |G|).
pub fn dice(pred: &SegMask, gt: &SegMask) -> Result<f64> {
    let o = overlap(pred, gt)?;
    if o.p + o.g == 0 {
        return Err(Error::BothMasksEmpty);
    }
    Ok(2.0 * o.inter as f64 / (o.p + o.g) as f64)
}

/// Jaccard index: |P∩G| / |P∪G|.
pub fn jaccard(pred: &SegMask, gt: &SegMask) -> Result<f64> {
    let o = overlap(pred, gt)?;
    let union = o.p + o.g - o.inter;
    if union == 0 {
        return Err(Error::BothMasksEmpty);
    }
    Ok(o.inter as f64 / union as f64)
}

/// Precision: |P∩G| / |P|.
pub fn precision(pred: &SegMask, gt: &SegMask) -> Result<f64> {
    let o = overlap(pred, gt)?;
    if o.p == 0 {
        return Err(Error::EmptyDenominator { which: "prediction" });
    }
    Ok(o.inter as f64 / o.p as f64)
}

/// Recall: |P∩G| / |G|.
pub fn recall(pred: &SegMask, gt: &SegMask) -> Result<f64> {
    let o = overlap(pred, gt)?;
    if o.g == 0 {
        return Err(Error::EmptyDenominator { which: "ground truth" });
    }
    Ok(o.inter as f64 / o.g as f64)
}

fn foreground_points(m: &SegMask) -> Vec<[usize; 3]> {
    let (d, h, w) = m.values.dim();
    let mut pts = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if m.values[[z, y, x]] == 1 {
                    pts.push([z, y, x]);
                }
            }
        }
    }
    pts
}

/// Symmetric Hausdorff distance between the foreground voxel centres of two
/// masks, Euclidean over spacing-scaled coordinates. Uses the exhaustive
/// pairwise scan for small sets and an exact Euclidean distance transform
/// otherwise.
pub fn hausdorff(pred: &SegMask, gt: &SegMask, spacing: [f64; 3]) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(Error::shape("mask pair", &gt.dims(), &pred.dims()));
    }
    let a = foreground_points(pred);
    let b = foreground_points(gt);
    if a.is_empty() {
        return Err(Error::EmptyPointSet { which: "prediction" });
    }
    if b.is_empty() {
        return Err(Error::EmptyPointSet { which: "ground truth" });
    }
    const BRUTE_FORCE_PAIR_LIMIT: usize = 4_000_000;
    let sq = if a.len().saturating_mul(b.len()) <= BRUTE_FORCE_PAIR_LIMIT {
        hausdorff_sq_brute(&a, &b, spacing)
    } else {
        hausdorff_sq_edt(pred, gt, spacing)
    };
    Ok(sq.sqrt())
}

fn dist_sq(p: &[usize; 3], q: &[usize; 3], spacing: [f64; 3]) -> f64 {
    let dz = (p[0] as f64 - q[0] as f64) * spacing[0];
    let dy = (p[1] as f64 - q[1] as f64) * spacing[1];
    let dx = (p[2] as f64 - q[2] as f64) * spacing[2];
    dz * dz + dy * dy + dx * dx
}

fn directed_sq_brute(from: &[[usize; 3]], to: &[[usize; 3]], spacing: [f64; 3]) -> f64 {
    let mut worst = 0.0f64;
    for p in from {
        let mut best = f64::INFINITY;
        for q in to {
            let d = dist_sq(p, q, spacing);
            if d < best {
                best = d;
            }
        }
        if best > worst {
            worst = best;
        }
    }
    worst
}

fn hausdorff_sq_brute(a: &[[usize; 3]], b: &[[usize; 3]], spacing: [f64; 3]) -> f64 {
    directed_sq_brute(a, b, spacing).max(directed_sq_brute(b, a, spacing))
}

fn hausdorff_sq_edt(pred: &SegMask, gt: &SegMask, spacing: [f64; 3]) -> f64 {
    let d_to_gt = edt_sq(&gt.values, spacing);
    let d_to_pred = edt_sq(&pred.values, spacing);
    let mut worst = 0.0f64;
    for (&m, &dsq) in pred.values.iter().zip(d_to_gt.iter()) {
        if m == 1 && dsq > worst {
            worst = dsq;
        }
    }
    for (&m, &dsq) in gt.values.iter().zip(d_to_pred.iter()) {
        if m == 1 && dsq > worst {
            worst = dsq;
        }
    }
    worst
}

/// Exact squared Euclidean distance transform to the mask foreground,
/// computed by the separable lower-envelope-of-parabolas method with
/// spacing-scaled sample coordinates.
fn edt_sq(mask: &Array3<u8>, spacing: [f64; 3]) -> Array3<f64> {
    let (d, h, w) = mask.dim();
    let mut dist = Array3::from_shape_fn((d, h, w), |(z, y, x)| {
        if mask[[z, y, x]] == 1 {
            0.0
        } else {
            f64::INFINITY
        }
    });
    let mut f = Vec::new();
    let mut out = Vec::new();
    // axis 2 (w), then 1 (h), then 0 (d)
    for z in 0..d {
        for y in 0..h {
            f.clear();
            f.extend((0..w).map(|x| dist[[z, y, x]]));
            dt_1d(&f, spacing[2], &mut out);
            for x in 0..w {
                dist[[z, y, x]] = out[x];
            }
        }
    }
    for z in 0..d {
        for x in 0..w {
            f.clear();
            f.extend((0..h).map(|y| dist[[z, y, x]]));
            dt_1d(&f, spacing[1], &mut out);
            for y in 0..h {
                dist[[z, y, x]] = out[y];
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            f.clear();
            f.extend((0..d).map(|z| dist[[z, y, x]]));
            dt_1d(&f, spacing[0], &mut out);
            for z in 0..d {
                dist[[z, y, x]] = out[z];
            }
        }
    }
    dist
}

/// 1D squared-distance transform: out[i] = min_j (f[j] + s^2 (i-j)^2).
fn dt_1d(f: &[f64], s: f64, out: &mut Vec<f64>) {
    let n = f.len();
    out.clear();
    out.resize(n, f64::INFINITY);
    let coord = |i: usize| i as f64 * s;
    // lower envelope of parabolas, skipping infinite sources
    let mut v: Vec<usize> = Vec::with_capacity(n); // parabola apex indices
    let mut zpts: Vec<f64> = Vec::with_capacity(n + 1); // envelope breakpoints
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        let mut s_q;
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    zpts.clear();
                    zpts.push(f64::NEG_INFINITY);
                    zpts.push(f64::INFINITY);
                    break;
                }
                Some(&p) => {
                    let xq = coord(q);
                    let xp = coord(p);
                    s_q = ((f[q] + xq * xq) - (f[p] + xp * xp)) / (2.0 * xq - 2.0 * xp);
                    if s_q <= *zpts.get(zpts.len() - 2).unwrap_or(&f64::NEG_INFINITY) {
                        v.pop();
                        zpts.pop();
                        zpts.pop();
                        zpts.push(f64::INFINITY);
                    } else {
                        *zpts.last_mut().unwrap() = s_q;
                        v.push(q);
                        zpts.push(f64::INFINITY);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        return; // all sources infinite
    }
    let mut k = 0usize;
    for (i, o) in out.iter_mut().enumerate() {
        let x = coord(i);
        while zpts[k + 1] < x {
            k += 1;
        }
        let dq = x - coord(v[k]);
        *o = f[v[k]] + dq * dq;
    }
}

/// Compute all five metrics for one case.
pub fn evaluate_case(pred: &SegMask, gt: &SegMask, spacing: [f64; 3], case_id: &str) -> Result<MetricReport> {
    Ok(MetricReport {
        case_id: case_id.to_string(),
        dice: dice(pred, gt)?,
        jaccard: jaccard(pred, gt)?,
        hd_mm: hausdorff(pred, gt, spacing)?,
        precision: precision(pred, gt)?,
        recall: recall(pred, gt)?,
    })
}

/// Render reports as CSV: `case_id,dice,jaccard,hd_mm,precision,recall`
/// with 4-decimal fixed formatting.
pub fn reports_to_csv(reports: &[MetricReport]) -> String {
    let mut out = String::from("case_id,dice,jaccard,hd_mm,precision,recall\n");
    for r in reports {
        writeln!(
            &mut out,
            "{},{:.4},{:.4},{:.4},{:.4},{:.4}",
            r.case_id, r.dice, r.jaccard, r.hd_mm, r.precision, r.recall
        )
        .expect("in-memory write");
    }
    out
}

pub fn write_reports_csv(path: impl AsRef<Path>, reports: &[MetricReport]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, reports_to_csv(reports)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn mask_of(points: &[[usize; 3]], dims: (usize, usize, usize)) -> SegMask {
        let mut v = Array3::zeros(dims);
        for p in points {
            v[[p[0], p[1], p[2]]] = 1;
        }
        SegMask::new(v, [1.0; 3]).unwrap()
    }

    fn random_mask(rng: &mut ChaCha12Rng, dims: (usize, usize, usize), max_points: usize) -> SegMask {
        let mut v = Array3::zeros(dims);
        let count = rng.random_range(1..=max_points);
        for _ in 0..count {
            let z = rng.random_range(0..dims.0);
            let y = rng.random_range(0..dims.1);
            let x = rng.random_range(0..dims.2);
            v[[z, y, x]] = 1;
        }
        SegMask::new(v, [1.0; 3]).unwrap()
    }

    #[test]
    fn identity_masks() {
        let m = mask_of(&[[1, 1, 1], [1, 1, 2], [2, 3, 1]], (4, 5, 5));
        assert_eq!(dice(&m, &m).unwrap(), 1.0);
        assert_eq!(jaccard(&m, &m).unwrap(), 1.0);
        assert_eq!(hausdorff(&m, &m, [1.0; 3]).unwrap(), 0.0);
        assert_eq!(precision(&m, &m).unwrap(), 1.0);
        assert_eq!(recall(&m, &m).unwrap(), 1.0);
    }

    #[test]
    fn disjoint_masks() {
        let p = mask_of(&[[0, 0, 0]], (4, 4, 4));
        let g = mask_of(&[[3, 3, 3]], (4, 4, 4));
        assert_eq!(dice(&p, &g).unwrap(), 0.0);
        assert_eq!(jaccard(&p, &g).unwrap(), 0.0);
        assert_eq!(precision(&p, &g).unwrap(), 0.0);
        assert_eq!(recall(&p, &g).unwrap(), 0.0);
    }

    #[test]
    fn constructed_containment_pair() {
        // |P| = 4 contained in |G| = 8: dice 8/12, jaccard 4/8,
        // precision 1, recall 1/2
        let p_pts: Vec<[usize; 3]> = (0..4).map(|i| [0, 0, i]).collect();
        let g_pts: Vec<[usize; 3]> = (0..8).map(|i| [0, i / 4, i % 4]).collect();
        let p = mask_of(&p_pts, (2, 3, 5));
        let g = mask_of(&g_pts, (2, 3, 5));
        assert!((dice(&p, &g).unwrap() - 8.0 / 12.0).abs() < 1e-15);
        assert_eq!(jaccard(&p, &g).unwrap(), 0.5);
        assert_eq!(precision(&p, &g).unwrap(), 1.0);
        assert_eq!(recall(&p, &g).unwrap(), 0.5);
        let rep = evaluate_case(&p, &g, [1.0; 3], "pair").unwrap();
        assert!((rep.dice - 0.6667).abs() < 5e-5);
        assert_eq!(rep.jaccard, 0.5);
    }

    #[test]
    fn overlapping_cubes_dice_half() {
        // two 8-voxel cubes overlapping in 4 voxels: dice = 8/16 = 0.5
        let p: Vec<[usize; 3]> = (0..8).map(|i| [i / 4, (i / 2) % 2, i % 2]).collect();
        let g: Vec<[usize; 3]> = (0..8).map(|i| [i / 4, (i / 2) % 2, i % 2 + 1]).collect();
        let p = mask_of(&p, (2, 2, 4));
        let g = mask_of(&g, (2, 2, 4));
        assert_eq!(dice(&p, &g).unwrap(), 0.5);
    }

    #[test]
    fn hausdorff_three_four_five() {
        let p = mask_of(&[[0, 0, 0]], (1, 4, 5));
        let g = mask_of(&[[0, 3, 4]], (1, 4, 5));
        assert_eq!(hausdorff(&p, &g, [1.0; 3]).unwrap(), 5.0);
    }

    #[test]
    fn hausdorff_spacing_scales_distances() {
        let p = mask_of(&[[0, 0, 0]], (2, 2, 2));
        let g = mask_of(&[[1, 0, 0]], (2, 2, 2));
        assert!((hausdorff(&p, &g, [0.19, 0.18, 0.18]).unwrap() - 0.19).abs() < 1e-15);
    }

    #[test]
    fn hausdorff_symmetry_and_oracle_agreement() {
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        for _ in 0..50 {
            let p = random_mask(&mut rng, (6, 7, 8), 30);
            let g = random_mask(&mut rng, (6, 7, 8), 30);
            let spacing = [1.0, 0.7, 1.3];
            let pg = hausdorff(&p, &g, spacing).unwrap();
            let gp = hausdorff(&g, &p, spacing).unwrap();
            assert_eq!(pg, gp, "hausdorff must be symmetric");
            // independent oracle: exhaustive max-min with reversed loop order
            let a = foreground_points(&p);
            let b = foreground_points(&g);
            let mut expect = 0.0f64;
            for (from, to) in [(&a, &b), (&b, &a)] {
                for pt in from.iter() {
                    let best = to
                        .iter()
                        .map(|q| dist_sq(pt, q, spacing))
                        .fold(f64::INFINITY, f64::min);
                    expect = expect.max(best);
                }
            }
            assert_eq!(pg, expect.sqrt());
        }
    }

    #[test]
    fn edt_path_matches_brute_force() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        for trial in 0..10 {
            let dims = (10, 12, 14);
            let p = random_mask(&mut rng, dims, 400);
            let g = random_mask(&mut rng, dims, 400);
            let spacing = [0.9, 1.1, 1.0];
            let a = foreground_points(&p);
            let b = foreground_points(&g);
            let brute = hausdorff_sq_brute(&a, &b, spacing).sqrt();
            let edt = hausdorff_sq_edt(&p, &g, spacing).sqrt();
            assert!(
                (brute - edt).abs() < 1e-9,
                "trial {trial}: brute {brute} vs edt {edt}"
            );
        }
    }

    #[test]
    fn empty_mask_errors() {
        let empty = mask_of(&[], (3, 3, 3));
        let full = mask_of(&[[1, 1, 1]], (3, 3, 3));
        assert!(matches!(dice(&empty, &empty), Err(Error::BothMasksEmpty)));
        assert!(matches!(
            hausdorff(&empty, &full, [1.0; 3]),
            Err(Error::EmptyPointSet { .. })
        ));
        assert!(matches!(
            precision(&empty, &full),
            Err(Error::EmptyDenominator { .. })
        ));
        assert!(matches!(
            recall(&full, &empty),
            Err(Error::EmptyDenominator { .. })
        ));
    }

    #[test]
    fn dice_jaccard_and_f1_identities() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..100 {
            let p = random_mask(&mut rng, (5, 6, 7), 40);
            let g = random_mask(&mut rng, (5, 6, 7), 40);
            let d = dice(&p, &g).unwrap();
            let j = jaccard(&p, &g).unwrap();
            assert!((d - 2.0 * j / (1.0 + j)).abs() < 1e-12);
            let pr = precision(&p, &g).unwrap();
            let rc = recall(&p, &g).unwrap();
            if pr + rc > 0.0 {
                assert!((d - 2.0 * pr * rc / (pr + rc)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn axis_permutation_invariance() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let dims = (5, 6, 7);
        let p = random_mask(&mut rng, dims, 25);
        let g = random_mask(&mut rng, dims, 25);
        let spacing = [0.5, 1.5, 2.0];
        let base = evaluate_case(&p, &g, spacing, "base").unwrap();
        // permute (d,h,w) -> (w,d,h) together with spacing
        let permute = |m: &SegMask| {
            let (d, h, w) = m.values.dim();
            let v = Array3::from_shape_fn((w, d, h), |(a, b, c)| m.values[[b, c, a]]);
            SegMask::new(v, [1.0; 3]).unwrap()
        };
        let pp = permute(&p);
        let gp = permute(&g);
        let perm = evaluate_case(&pp, &gp, [spacing[2], spacing[0], spacing[1]], "perm").unwrap();
        assert!((base.dice - perm.dice).abs() < 1e-15);
        assert!((base.jaccard - perm.jaccard).abs() < 1e-15);
        assert!((base.hd_mm - perm.hd_mm).abs() < 1e-12);
        assert!((base.precision - perm.precision).abs() < 1e-15);
        assert!((base.recall - perm.recall).abs() < 1e-15);
    }

    #[test]
    fn csv_formatting() {
        let rep = MetricReport {
            case_id: "case_000".into(),
            dice: 0.92803,
            jaccard: 0.87012,
            hd_mm: 4.6395,
            precision: 0.93109,
            recall: 0.92424,
        };
        let csv = reports_to_csv(&[rep]);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "case_id,dice,jaccard,hd_mm,precision,recall");
        assert_eq!(lines.next().unwrap(), "case_000,0.9280,0.8701,4.6395,0.9311,0.9242");
    }
}
