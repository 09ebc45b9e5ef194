//! Brute-force reference implementations and random generators shared by
//! the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

use ipnp::volgrid::{Dims, LabelMap, Mask, ProbVolume, Spacing};
use rand::Rng;

pub fn brute_dice(a: &Mask, b: &Mask) -> f64 {
    let na = a.data().iter().filter(|&&x| x).count();
    let nb = b.data().iter().filter(|&&x| x).count();
    let inter = a
        .data()
        .iter()
        .zip(b.data())
        .filter(|(&x, &y)| x && y)
        .count();
    if na + nb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (na + nb) as f64
    }
}

pub fn brute_boundary(m: &Mask) -> Vec<[usize; 3]> {
    let d = m.dims();
    let mut out = Vec::new();
    for z in 0..d.nz() {
        for y in 0..d.ny() {
            for x in 0..d.nx() {
                if !m.get(x, y, z) {
                    continue;
                }
                let p = [x as i64, y as i64, z as i64];
                let exposed = [
                    [-1, 0, 0],
                    [1, 0, 0],
                    [0, -1, 0],
                    [0, 1, 0],
                    [0, 0, -1],
                    [0, 0, 1],
                ]
                .iter()
                .any(|o| {
                    let q = [p[0] + o[0], p[1] + o[1], p[2] + o[2]];
                    !d.contains(q) || !m.get(q[0] as usize, q[1] as usize, q[2] as usize)
                });
                if exposed {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

fn dist(a: [usize; 3], b: [usize; 3], s: Spacing) -> f64 {
    let dx = (a[0] as f64 - b[0] as f64).abs() * s.0[0];
    let dy = (a[1] as f64 - b[1] as f64).abs() * s.0[1];
    let dz = (a[2] as f64 - b[2] as f64).abs() * s.0[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// O(n²) HD95; `None` when either mask is empty.
pub fn brute_hd95(a: &Mask, b: &Mask, s: Spacing) -> Option<f64> {
    let (ba, bb) = (brute_boundary(a), brute_boundary(b));
    if ba.is_empty() || bb.is_empty() {
        return None;
    }
    let directed = |from: &[[usize; 3]], to: &[[usize; 3]]| -> Vec<f64> {
        from.iter()
            .map(|&p| {
                to.iter()
                    .map(|&q| dist(p, q, s))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    };
    let mut all = directed(&ba, &bb);
    all.extend(directed(&bb, &ba));
    all.sort_by(f64::total_cmp);
    let rank = 0.95 * (all.len() - 1) as f64;
    let (lo, hi) = (rank.floor() as usize, rank.ceil() as usize);
    Some(all[lo] + (rank - lo as f64) * (all[hi] - all[lo]))
}

/// Per-voxel selection rule written out directly: first maximal class is
/// the prediction; a voxel counts unless its target class is pseudo and the
/// prediction differs.
pub fn brute_vls(probs: &ProbVolume, labels: &LabelMap, pseudo: &BTreeSet<u8>) -> Vec<bool> {
    let n = labels.dims().len();
    (0..n)
        .map(|v| {
            let mut best = 0usize;
            for c in 1..probs.num_classes() {
                if probs.prob(c, v) > probs.prob(best, v) {
                    best = c;
                }
            }
            let y = labels.data()[v];
            if pseudo.contains(&y) {
                best == y as usize
            } else {
                true
            }
        })
        .collect()
}

/// Central differences of `f` at `x`.
pub fn fd_grad(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut buf = x.to_vec();
    (0..x.len())
        .map(|i| {
            buf[i] = x[i] + h;
            let up = f(&buf);
            buf[i] = x[i] - h;
            let down = f(&buf);
            buf[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn random_dims(rng: &mut impl Rng, max: usize) -> Dims {
    Dims::new(
        rng.gen_range(1..=max),
        rng.gen_range(1..=max),
        rng.gen_range(1..=max),
    )
    .unwrap()
}

/// A few random boxes and balls, so masks have real surfaces.
pub fn random_blobs(rng: &mut impl Rng, dims: Dims, blobs: usize) -> Mask {
    let shapes: Vec<([f64; 3], f64, bool)> = (0..blobs)
        .map(|_| {
            let c = [0, 1, 2].map(|k| rng.gen_range(0.0..dims.0[k] as f64));
            let r =
                rng.gen_range(0.5..(dims.0.iter().copied().max().unwrap() as f64 / 2.0).max(1.0));
            (c, r, rng.gen_bool(0.5))
        })
        .collect();
    Mask::from_fn(dims, |p| {
        shapes.iter().any(|&(c, r, ball)| {
            let d = [0, 1, 2].map(|k| (p[k] as f64 - c[k]).abs());
            if ball {
                (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt() <= r
            } else {
                d.iter().all(|&x| x <= r)
            }
        })
    })
}

pub fn random_mask(rng: &mut impl Rng, dims: Dims) -> Mask {
    if rng.gen_bool(0.3) {
        let density = rng.gen_range(0.05..0.6);
        Mask::from_fn(dims, |_| rng.gen_bool(density))
    } else {
        let k = rng.gen_range(1..4);
        random_blobs(rng, dims, k)
    }
}

/// Spacings whose products with small integers square and add exactly.
pub fn dyadic_spacing(rng: &mut impl Rng) -> Spacing {
    const CHOICES: [f64; 6] = [0.25, 0.5, 0.75, 1.0, 1.5, 2.0];
    let mut pick = || CHOICES[rng.gen_range(0..CHOICES.len())];
    Spacing::new(pick(), pick(), pick()).unwrap()
}

pub fn random_probs(rng: &mut impl Rng, c: usize, dims: Dims) -> ProbVolume {
    let n = dims.len();
    let mut data = vec![0f32; c * n];
    for v in 0..n {
        let raw: Vec<f64> = (0..c).map(|_| rng.gen_range(0.05..1.0)).collect();
        let s: f64 = raw.iter().sum();
        for k in 0..c {
            data[k * n + v] = (raw[k] / s) as f32;
        }
    }
    ProbVolume::new(c, dims, data).unwrap()
}

pub fn random_labels(rng: &mut impl Rng, c: usize, dims: Dims) -> LabelMap {
    let data = (0..dims.len()).map(|_| rng.gen_range(0..c) as u8).collect();
    LabelMap::new(c, dims, data).unwrap()
}
