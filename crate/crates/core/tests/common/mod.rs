//! Independent brute-force oracles shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use rough_chaos::variation::TwoIndexFn;

/// `sup Σ |g|^p` over every sub-partition of `window`, by enumerating subsets of
/// interior points. Sums run left to right.
pub fn exhaustive_p_variation_pow(g: impl Fn(usize, usize) -> f64, p: f64, window: (usize, usize)) -> f64 {
    let (a, b) = window;
    if a == b {
        return 0.0;
    }
    let interior = b - a - 1;
    let mut best = f64::NEG_INFINITY;
    for mask in 0u32..(1u32 << interior) {
        let mut prev = a;
        let mut sum = 0.0;
        for bit in 0..interior {
            if mask & (1 << bit) != 0 {
                let t = a + 1 + bit;
                sum += g(prev, t).abs().powf(p);
                prev = t;
            }
        }
        sum += g(prev, b).abs().powf(p);
        best = best.max(sum);
    }
    best
}

/// Visits every permutation of `0..n` (Heap's algorithm).
pub fn for_each_permutation(n: usize, mut visit: impl FnMut(&[usize])) {
    let mut perm: Vec<usize> = (0..n).collect();
    let mut c = vec![0usize; n];
    visit(&perm);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            visit(&perm);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
}

/// `d_r` between equal-size clouds (`n x d`, row-major) by trying every matching.
pub fn factorial_wasserstein(a: &[f64], b: &[f64], d: usize, r: f64) -> f64 {
    let n = a.len() / d;
    let dist = |i: usize, j: usize| -> f64 {
        (0..d).map(|k| (a[i * d + k] - b[j * d + k]).powi(2)).sum::<f64>().sqrt().powf(r)
    };
    let mut best = f64::INFINITY;
    for_each_permutation(n, |perm| {
        let cost: f64 = perm.iter().enumerate().map(|(i, &j)| dist(i, j)).sum();
        best = best.min(cost);
    });
    (best / n as f64).powf(1.0 / r)
}

pub fn random_cloud(rng: &mut impl Rng, n: usize, d: usize) -> Vec<f64> {
    (0..n * d).map(|_| rng.random_range(-3.0..3.0)).collect()
}

/// Random non-negative step weights, about half of them zero.
pub fn sparse_weights(rng: &mut impl Rng, steps: usize) -> Vec<f64> {
    (0..steps).map(|_| if rng.random::<f64>() < 0.5 { 0.0 } else { rng.random::<f64>() }).collect()
}

/// `ϖ(s,t) = (Σ_{s<=k<t} w_k)^θ`: monotone under inclusion, superadditive for `θ >= 1`.
pub fn powered_additive(weights: &[f64], theta: f64) -> TwoIndexFn {
    let mut cum = vec![0.0; weights.len() + 1];
    for (k, w) in weights.iter().enumerate() {
        cum[k + 1] = cum[k] + w;
    }
    TwoIndexFn::from_fn(weights.len() + 1, "powered", move |s, t| (cum[t] - cum[s]).powf(theta))
}

/// Central finite difference of a vector-valued map in coordinate `k` of `x`.
pub fn central_difference(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], k: usize, h: f64) -> Vec<f64> {
    let (mut up, mut down) = (x.to_vec(), x.to_vec());
    up[k] += h;
    down[k] -= h;
    f(&up).iter().zip(f(&down)).map(|(u, v)| (u - v) / (2.0 * h)).collect()
}
