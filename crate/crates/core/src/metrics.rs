//! Dice similarity and boundary HD95.
//!
//! HD95 convention: boundary voxels are foreground voxels with at least one
//! 6-connected neighbour that is background or outside the grid. For every
//! boundary voxel of either mask the spacing-scaled Euclidean distance to the
//! nearest boundary voxel of the other mask is taken; both directed sets are
//! pooled and the 95th percentile is read off with linear interpolation
//! between order statistics (rank `0.95 * (n - 1)`).
//!
//! Nearest boundary voxels are found with a separable exact Euclidean
//! feature transform, and the distance is then evaluated as
//! `sqrt(((dx*sx)^2 + (dy*sy)^2) + (dz*sz)^2)`.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::manifest::ScanManifest;
use crate::volgrid::{class_mask, Dims, LabelMap, Mask, Spacing};

/// `2|A∩B| / (|A|+|B|)`, 1 when both are empty.
pub fn dice(a: &Mask, b: &Mask) -> Result<f64> {
    a.dims().check_same(b.dims())?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Foreground voxels touching background (or the grid edge) through a face.
pub fn boundary(mask: &Mask) -> Mask {
    let dims = mask.dims();
    let d = dims.0;
    Mask::from_fn(dims, |[x, y, z]| {
        if !mask.get(x, y, z) {
            return false;
        }
        x == 0
            || y == 0
            || z == 0
            || x + 1 == d[0]
            || y + 1 == d[1]
            || z + 1 == d[2]
            || !mask.get(x - 1, y, z)
            || !mask.get(x + 1, y, z)
            || !mask.get(x, y - 1, z)
            || !mask.get(x, y + 1, z)
            || !mask.get(x, y, z - 1)
            || !mask.get(x, y, z + 1)
    })
}

#[inline]
pub fn voxel_distance(a: [usize; 3], b: [usize; 3], spacing: Spacing) -> f64 {
    let s = spacing.0;
    let d = |k: usize| (a[k] as f64 - b[k] as f64).abs() * s[k];
    let (dx, dy, dz) = (d(0), d(1), d(2));
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Lower envelope of parabolas `f[i] + (s (q - i))^2` along one line,
/// carrying the site that attains the minimum.
fn envelope_1d(
    f: &[f64],
    feat: &[usize],
    s: f64,
    out_f: &mut [f64],
    out_feat: &mut [usize],
    v: &mut Vec<usize>,
    z: &mut Vec<f64>,
) {
    let n = f.len();
    let s2 = s * s;
    v.clear();
    z.clear();
    for q in (0..n).filter(|&q| f[q].is_finite()) {
        let fq = f[q] + s2 * (q * q) as f64;
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let fp = f[p] + s2 * (p * p) as f64;
                    let cross = (fq - fp) / (2.0 * s2 * (q - p) as f64);
                    if cross <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(cross);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out_f.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for q in 0..n {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = (q as f64 - p as f64) * s;
        out_f[q] = f[p] + d * d;
        out_feat[q] = feat[p];
    }
}

/// For every voxel, the flat index of a nearest site voxel under the
/// spacing-scaled Euclidean metric. `None` when there are no sites.
pub fn nearest_site_map(sites: &Mask, spacing: Spacing) -> Option<Vec<usize>> {
    if sites.is_empty() {
        return None;
    }
    let dims = sites.dims();
    let n = dims.len();
    let mut f: Vec<f64> = sites
        .data()
        .iter()
        .map(|&s| if s { 0.0 } else { f64::INFINITY })
        .collect();
    let mut feat: Vec<usize> = (0..n).collect();

    let (mut v, mut z) = (Vec::new(), Vec::new());
    for axis in 0..3 {
        let len = dims.0[axis];
        let stride = match axis {
            0 => 1,
            1 => dims.nx(),
            _ => dims.nx() * dims.ny(),
        };
        let (mut lf, mut lfeat) = (vec![0.0; len], vec![0usize; len]);
        let (mut of, mut ofeat) = (vec![0.0; len], vec![0usize; len]);
        for start in 0..n {
            // visit each line once, from its first voxel
            if (start / stride) % len != 0 {
                continue;
            }
            for i in 0..len {
                lf[i] = f[start + i * stride];
                lfeat[i] = feat[start + i * stride];
            }
            envelope_1d(
                &lf,
                &lfeat,
                spacing.0[axis],
                &mut of,
                &mut ofeat,
                &mut v,
                &mut z,
            );
            for i in 0..len {
                f[start + i * stride] = of[i];
                feat[start + i * stride] = ofeat[i];
            }
        }
    }
    Some(feat)
}

/// Distances from every boundary voxel of `from` to the nearest boundary
/// voxel of `to`, in layout order of `from`'s boundary.
pub fn directed_boundary_distances(from: &Mask, to: &Mask, spacing: Spacing) -> Result<Vec<f64>> {
    from.dims().check_same(to.dims())?;
    let dims = from.dims();
    let nearest = nearest_site_map(&boundary(to), spacing).ok_or(Error::EmptyMask)?;
    Ok(boundary(from)
        .foreground()
        .map(|p| {
            let q = dims.coords(nearest[dims.index(p[0], p[1], p[2])]);
            voxel_distance(p, q, spacing)
        })
        .collect())
}

/// Linear-interpolation percentile of sorted data, `q` in `[0, 1]`.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let rank = q * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (rank - lo as f64) * (sorted[hi] - sorted[lo])
}

/// 95th-percentile boundary Hausdorff distance in millimetres.
pub fn hd95(a: &Mask, b: &Mask, spacing: Spacing) -> Result<f64> {
    a.dims().check_same(b.dims())?;
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyMask);
    }
    let mut d = directed_boundary_distances(a, b, spacing)?;
    d.extend(directed_boundary_distances(b, a, spacing)?);
    d.sort_by(f64::total_cmp);
    Ok(percentile_sorted(&d, 0.95))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HdMissingPolicy {
    /// Leave undefined HD95 values out of the average.
    #[default]
    Exclude,
    /// Substitute the grid diagonal in millimetres when one side is empty.
    MaxDiag,
}

impl FromStr for HdMissingPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exclude" => Ok(HdMissingPolicy::Exclude),
            "max_diag" => Ok(HdMissingPolicy::MaxDiag),
            other => Err(Error::Config(format!(
                "unknown hd95_missing_policy {other:?}"
            ))),
        }
    }
}

impl HdMissingPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            HdMissingPolicy::Exclude => "exclude",
            HdMissingPolicy::MaxDiag => "max_diag",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    pub class_id: u8,
    pub dsc: f64,
    pub hd95: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanMetrics {
    pub per_class: Vec<ClassMetrics>,
    pub mean_dsc: f64,
    pub mean_hd95: Option<f64>,
}

fn grid_diagonal(dims: Dims, spacing: Spacing) -> f64 {
    (0..3)
        .map(|k| ((dims.0[k] - 1) as f64 * spacing.0[k]).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Per-class DSC/HD95 over foreground classes plus macro averages.
pub fn evaluate_scan(
    pred: &LabelMap,
    gt: &LabelMap,
    spacing: Spacing,
    policy: HdMissingPolicy,
) -> Result<ScanMetrics> {
    pred.dims().check_same(gt.dims())?;
    let classes = gt.num_classes().max(pred.num_classes());
    let mut per_class = Vec::with_capacity(classes - 1);
    for c in 1..classes {
        let class_of = |l: &LabelMap| {
            if c < l.num_classes() {
                class_mask(l, c)
            } else {
                Ok(Mask::empty(l.dims()))
            }
        };
        let (p, g) = (class_of(pred)?, class_of(gt)?);
        let dsc = dice(&p, &g)?;
        let hd = match hd95(&p, &g, spacing) {
            Ok(h) => Some(h),
            Err(Error::EmptyMask) => match policy {
                HdMissingPolicy::MaxDiag if p.is_empty() != g.is_empty() => {
                    Some(grid_diagonal(gt.dims(), spacing))
                }
                _ => None,
            },
            Err(e) => return Err(e),
        };
        per_class.push(ClassMetrics {
            class_id: c as u8,
            dsc,
            hd95: hd,
        });
    }
    Ok(summarize(per_class))
}

pub fn summarize(per_class: Vec<ClassMetrics>) -> ScanMetrics {
    let mean_dsc = if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().map(|m| m.dsc).sum::<f64>() / per_class.len() as f64
    };
    let hds: Vec<f64> = per_class.iter().filter_map(|m| m.hd95).collect();
    let mean_hd95 = (!hds.is_empty()).then(|| hds.iter().sum::<f64>() / hds.len() as f64);
    ScanMetrics {
        per_class,
        mean_dsc,
        mean_hd95,
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|h| format!("{h:.6}")).unwrap_or_default()
}

/// `class,dsc,hd95` rows; undefined HD95 is left blank.
pub fn metrics_csv(m: &ScanMetrics) -> String {
    let mut out = String::from("class,dsc,hd95\n");
    for c in &m.per_class {
        let _ = writeln!(out, "{},{:.6},{}", c.class_id, c.dsc, fmt_opt(c.hd95));
    }
    out
}

/// Human-readable table, DSC in percent and HD95 in millimetres.
pub fn metrics_table(m: &ScanMetrics, manifest: Option<&ScanManifest>) -> String {
    let name = |c: u8| {
        manifest
            .map(|mf| mf.class_name(c))
            .unwrap_or_else(|| format!("class_{c}"))
    };
    let width = m
        .per_class
        .iter()
        .map(|c| name(c.class_id).len())
        .chain(["Average".len()])
        .max()
        .unwrap_or(7);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$}  {:>8}  {:>10}",
        "Organ", "DSC (%)", "HD95 (mm)"
    );
    for c in &m.per_class {
        let hd = c
            .hd95
            .map(|h| format!("{h:.2}"))
            .unwrap_or_else(|| "-".into());
        let _ = writeln!(
            out,
            "{:<width$}  {:>8.2}  {:>10}",
            name(c.class_id),
            100.0 * c.dsc,
            hd
        );
    }
    let hd = m
        .mean_hd95
        .map(|h| format!("{h:.2}"))
        .unwrap_or_else(|| "-".into());
    let _ = writeln!(
        out,
        "{:<width$}  {:>8.2}  {:>10}",
        "Average",
        100.0 * m.mean_dsc,
        hd
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube(dims: Dims, lo: [usize; 3], hi: [usize; 3]) -> Mask {
        Mask::from_fn(dims, |p| (0..3).all(|k| lo[k] <= p[k] && p[k] < hi[k]))
    }

    #[test]
    fn dice_examples() {
        let d = Dims::new(20, 20, 20).unwrap();
        let a = cube(d, [0, 0, 0], [10, 10, 10]);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        let far = cube(d, [12, 12, 12], [14, 14, 14]);
        assert_eq!(dice(&a, &far).unwrap(), 0.0);
        let shifted = cube(d, [0, 0, 5], [10, 10, 15]);
        assert_eq!(dice(&a, &shifted).unwrap(), 0.5);
        assert_eq!(dice(&Mask::empty(d), &Mask::empty(d)).unwrap(), 1.0);
        assert_eq!(dice(&a, &Mask::empty(d)).unwrap(), 0.0);
    }

    #[test]
    fn hd95_examples() {
        let d = Dims::new(12, 12, 12).unwrap();
        let a = cube(d, [2, 2, 2], [7, 8, 9]);
        assert_eq!(hd95(&a, &a, Spacing::default()).unwrap(), 0.0);

        let p = Mask::from_fn(d, |q| q == [1, 4, 4]);
        let q = Mask::from_fn(d, |r| r == [6, 4, 4]);
        assert_eq!(hd95(&p, &q, Spacing::default()).unwrap(), 5.0);
        let s = Spacing::new(2.0, 1.0, 1.0).unwrap();
        assert_eq!(hd95(&p, &q, s).unwrap(), 10.0);

        assert!(matches!(
            hd95(&a, &Mask::empty(d), Spacing::default()),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn boundary_counts_grid_faces() {
        let d = Dims::new(3, 3, 3).unwrap();
        let full = Mask::full(d);
        // only the centre voxel is interior
        assert_eq!(boundary(&full).count(), 26);
    }

    #[test]
    fn percentile_interpolates() {
        let v = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile_sorted(&v, 0.95), 3.8);
        assert_eq!(percentile_sorted(&[7.0], 0.95), 7.0);
    }

    #[test]
    fn evaluate_examples() {
        let d = Dims::new(10, 10, 10).unwrap();
        let data: Vec<u8> = (0..d.len())
            .map(|i| {
                let [x, _, _] = d.coords(i);
                if x < 3 {
                    1
                } else if x > 6 {
                    2
                } else {
                    0
                }
            })
            .collect();
        let gt = LabelMap::new(3, d, data.clone()).unwrap();
        let m = evaluate_scan(&gt, &gt, Spacing::default(), HdMissingPolicy::Exclude).unwrap();
        assert!(m
            .per_class
            .iter()
            .all(|c| c.dsc == 1.0 && c.hd95 == Some(0.0)));

        let missing: Vec<u8> = data.iter().map(|&l| if l == 2 { 0 } else { l }).collect();
        let pred = LabelMap::new(3, d, missing).unwrap();
        let m = evaluate_scan(&pred, &gt, Spacing::default(), HdMissingPolicy::Exclude).unwrap();
        assert_eq!(m.per_class[1].dsc, 0.0);
        assert_eq!(m.per_class[1].hd95, None);
        assert_eq!(m.mean_dsc, 0.5);
        assert_eq!(m.mean_hd95, Some(0.0));

        let m = evaluate_scan(&pred, &gt, Spacing::default(), HdMissingPolicy::MaxDiag).unwrap();
        assert!((m.per_class[1].hd95.unwrap() - (3.0f64 * 81.0).sqrt()).abs() < 1e-12);

        let csv = metrics_csv(
            &evaluate_scan(&pred, &gt, Spacing::default(), HdMissingPolicy::Exclude).unwrap(),
        );
        assert_eq!(csv, "class,dsc,hd95\n1,1.000000,0.000000\n2,0.000000,\n");
    }
}
