#![allow(dead_code)]

use half::f16;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f32> {
    Array2::from_shape_fn((rows, cols), |_| {
        let z: f64 = StandardNormal.sample(rng);
        (z * std) as f32
    })
}

/// Gaussian values rounded to f16 and widened back, so they are exactly representable.
pub fn gaussian_f16(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f32> {
    gaussian(rng, rows, cols, 1.0).mapv(|v| f16::from_f32(v).to_f32())
}

/// `|N(0,1)|` scaled by a lognormal factor per column, like `|w| * channel importance`.
pub fn metric_scores(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let scale: Vec<f64> = (0..cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z.exp()
        })
        .collect();
    Array2::from_shape_fn((rows, cols), |(_, c)| {
        let z: f64 = StandardNormal.sample(rng);
        z.abs() * scale[c]
    })
}

pub fn random_order(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
    v
}

/// Best `n`-subset sum of `vals` by enumerating all subsets.
pub fn best_subset_sum(vals: &[f64], n: usize) -> f64 {
    let m = vals.len();
    let mut best = f64::NEG_INFINITY;
    for bits in 0u32..(1 << m) {
        if bits.count_ones() as usize != n {
            continue;
        }
        let s: f64 = (0..m).filter(|i| bits >> i & 1 == 1).map(|i| vals[i]).sum();
        best = best.max(s);
    }
    best
}

/// Retained objective by per-group subset enumeration.
pub fn retained_oracle(scores: &Array2<f64>, order: &[usize], n: usize, m: usize) -> f64 {
    let mut total = 0.0;
    for row in scores.rows() {
        for g in 0..order.len() / m {
            let vals: Vec<f64> = (0..m).map(|s| row[order[g * m + s]]).collect();
            total += best_subset_sum(&vals, n);
        }
    }
    total
}

/// Exact optimum over all channel orders, by dynamic programming over
/// subsets of channels: the objective only depends on how channels are
/// partitioned into groups, so `best(S)` for the channel set `S` is the
/// best group containing the lowest channel of `S` plus `best(rest)`.
pub fn exhaustive_optimum(scores: &Array2<f64>, n: usize, m: usize) -> f64 {
    let c = scores.ncols();
    assert!(c <= 20);
    let full = (1usize << c) - 1;
    let group_value = |mask: usize| -> f64 {
        let members: Vec<usize> = (0..c).filter(|i| mask >> i & 1 == 1).collect();
        scores
            .rows()
            .into_iter()
            .map(|row| {
                let vals: Vec<f64> = members.iter().map(|&i| row[i]).collect();
                best_subset_sum(&vals, n)
            })
            .sum()
    };
    let mut group_cache = vec![f64::NAN; full + 1];
    let mut best = vec![f64::NAN; full + 1];
    best[0] = 0.0;
    for mask in 1..=full {
        if !(mask.count_ones() as usize).is_multiple_of(m) {
            continue;
        }
        let low = mask.trailing_zeros() as usize;
        let rest = mask & !(1 << low);
        let mut top = f64::NEG_INFINITY;
        let mut sub = rest;
        // enumerate (m-1)-subsets of `rest`
        loop {
            if sub.count_ones() as usize == m - 1 {
                let group = sub | (1 << low);
                if group_cache[group].is_nan() {
                    group_cache[group] = group_value(group);
                }
                let v = group_cache[group] + best[mask & !group];
                top = top.max(v);
            }
            if sub == 0 {
                break;
            }
            sub = (sub - 1) & rest;
        }
        best[mask] = top;
    }
    best[full]
}

/// `‖X·Wᵀ − X·Wpᵀ‖_F` with every product and sum in f64.
pub fn recon_oracle(w: &Array2<f32>, wp: &Array2<f32>, x: &Array2<f32>) -> f64 {
    let mut sq = 0.0f64;
    for t in 0..x.nrows() {
        for r in 0..w.nrows() {
            let mut d = 0.0f64;
            for c in 0..x.ncols() {
                d += x[[t, c]] as f64 * (w[[r, c]] as f64 - wp[[r, c]] as f64);
            }
            sq += d * d;
        }
    }
    sq.sqrt()
}

/// Dense `X · Wᵀ` accumulated in f64.
pub fn matmul_oracle(w: &Array2<f32>, x: &Array2<f32>) -> Array2<f64> {
    Array2::from_shape_fn((x.nrows(), w.nrows()), |(t, r)| {
        (0..x.ncols())
            .map(|c| x[[t, c]] as f64 * w[[r, c]] as f64)
            .sum()
    })
}

pub fn rel_frobenius(a: &Array2<f32>, b: &Array2<f64>) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (*x as f64 - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

/// Keeps a random `n` of every `m` consecutive columns per row.
pub fn random_nm_mask(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    n: usize,
    m: usize,
) -> Array2<bool> {
    let mut mask = Array2::from_elem((rows, cols), false);
    for r in 0..rows {
        for g in 0..cols / m {
            let pick = random_order(rng, m);
            for &p in &pick[..n] {
                mask[[r, g * m + p]] = true;
            }
        }
    }
    mask
}
