//! Discrete prolate spheroidal sequences and spectral concentration.

use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{param, Error, Result};
use crate::quad::panel_rule;
use crate::transform::SegmentSignal;
use crate::waveform::PiecewiseConstantWaveform;

/// The K most concentrated DPSS of length N and half-bandwidth W.
#[derive(Debug, Clone)]
pub struct DpssSet {
    pub n: usize,
    pub w: f64,
    /// Unit-norm sequences, most concentrated first.
    pub sequences: Vec<Vec<f64>>,
    /// Concentration ratios λ_k in (0, 1).
    pub eigenvalues: Vec<f64>,
}

impl DpssSet {
    pub fn k(&self) -> usize {
        self.sequences.len()
    }

    pub fn nw(&self) -> f64 {
        self.n as f64 * self.w
    }
}

/// Compute the first `k` DPSS for length `n` and half-bandwidth `w`.
///
/// Sequences are the top eigenvectors of the tridiagonal matrix that commutes
/// with the sinc Toeplitz kernel, found by Sturm bisection and inverse
/// iteration. Concentrations are Rayleigh quotients of the Toeplitz kernel.
pub fn dpss(n: usize, w: f64, k: usize) -> Result<DpssSet> {
    if !(w > 0.0 && w < 0.5) {
        return param(format!("half-bandwidth W must lie in (0, 1/2), got {w}"));
    }
    if k == 0 || k > n {
        return param(format!("order count K must satisfy 1 <= K <= N, got K={k}, N={n}"));
    }
    let nf = n as f64;
    let cw = (2.0 * PI * w).cos();
    let diag: Vec<f64> = (0..n)
        .map(|i| {
            let h = (nf - 1.0 - 2.0 * i as f64) / 2.0;
            h * h * cw
        })
        .collect();
    let off: Vec<f64> = (1..n).map(|i| i as f64 * (nf - i as f64) / 2.0).collect();

    let mut sequences: Vec<Vec<f64>> = Vec::with_capacity(k);
    for order in 0..k {
        let theta = kth_largest_eigenvalue(&diag, &off, order);
        let mut v = inverse_iteration(&diag, &off, theta, &sequences);
        // Even orders are symmetric, odd orders antisymmetric.
        let parity = if order % 2 == 0 { 1.0 } else { -1.0 };
        let rev: Vec<f64> = v.iter().rev().copied().collect();
        for (a, b) in v.iter_mut().zip(&rev) {
            *a = 0.5 * (*a + parity * b);
        }
        normalize(&mut v);
        let peak = v.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        if let Some(first) = v.iter().find(|x| x.abs() > 1e-12 * peak) {
            if *first < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
        }
        sequences.push(v);
    }
    let eigenvalues = sequences.iter().map(|v| toeplitz_rayleigh(v, w)).collect();
    Ok(DpssSet { n, w, sequences, eigenvalues })
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
}

/// Number of eigenvalues strictly less than x.
fn sturm_count(diag: &[f64], off: &[f64], x: f64) -> usize {
    let mut count = 0;
    let mut q = diag[0] - x;
    if q < 0.0 {
        count += 1;
    }
    for i in 1..diag.len() {
        let denom = if q == 0.0 { f64::MIN_POSITIVE.sqrt() } else { q };
        q = diag[i] - x - off[i - 1] * off[i - 1] / denom;
        if q < 0.0 {
            count += 1;
        }
    }
    count
}

fn kth_largest_eigenvalue(diag: &[f64], off: &[f64], k: usize) -> f64 {
    let n = diag.len();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..n {
        let r = if i > 0 { off[i - 1].abs() } else { 0.0 } + if i + 1 < n { off[i].abs() } else { 0.0 };
        lo = lo.min(diag[i] - r);
        hi = hi.max(diag[i] + r);
    }
    // Want the eigenvalue with exactly n-1-k eigenvalues below it.
    let target = n - 1 - k;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if sturm_count(diag, off, mid) > target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Solve (T − θI)x = b for tridiagonal T with partial pivoting.
fn tridiagonal_solve(diag: &[f64], off: &[f64], theta: f64, rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    if n == 1 {
        let d = diag[0] - theta;
        let d = if d == 0.0 { 1e-300 } else { d };
        return vec![rhs[0] / d];
    }
    // Rows stored as (sub, main, sup, sup2) after pivoting.
    let mut a: Vec<[f64; 3]> = (0..n)
        .map(|i| {
            [
                diag[i] - theta,
                if i + 1 < n { off[i] } else { 0.0 },
                0.0,
            ]
        })
        .collect();
    let mut b = rhs.to_vec();
    let mut sub: Vec<f64> = (0..n).map(|i| if i > 0 { off[i - 1] } else { 0.0 }).collect();
    let scale = diag.iter().fold(1.0f64, |m, d| m.max(d.abs()));
    let tiny = scale * 1e-300f64.max(f64::EPSILON * 1e-3);
    for i in 0..n - 1 {
        let l = sub[i + 1];
        if l.abs() > a[i][0].abs() {
            // Swap rows i and i+1.
            let next = [l, a[i + 1][0], a[i + 1][1]];
            let cur = a[i];
            a[i] = next;
            let (c0, c1, c2) = (cur[0], cur[1], cur[2]);
            let f = c0 / a[i][0];
            a[i + 1] = [c1 - f * a[i][1], c2 - f * a[i][2], 0.0];
            b.swap(i, i + 1);
            b[i + 1] -= f * b[i];
        } else {
            if a[i][0] == 0.0 {
                a[i][0] = tiny;
            }
            let f = l / a[i][0];
            a[i + 1][0] -= f * a[i][1];
            a[i + 1][1] -= f * a[i][2];
            b[i + 1] -= f * b[i];
        }
        sub[i + 1] = 0.0;
    }
    if a[n - 1][0] == 0.0 {
        a[n - 1][0] = tiny;
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = b[i];
        if i + 1 < n {
            s -= a[i][1] * x[i + 1];
        }
        if i + 2 < n {
            s -= a[i][2] * x[i + 2];
        }
        x[i] = s / a[i][0];
    }
    x
}

fn inverse_iteration(diag: &[f64], off: &[f64], theta: f64, previous: &[Vec<f64>]) -> Vec<f64> {
    let n = diag.len();
    // Deterministic, non-symmetric start vector.
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.5 * ((i as f64 + 1.0) * 0.618).sin()).collect();
    normalize(&mut v);
    for _ in 0..4 {
        let mut x = tridiagonal_solve(diag, off, theta, &v);
        for p in previous {
            let d: f64 = x.iter().zip(p).map(|(a, b)| a * b).sum();
            x.iter_mut().zip(p).for_each(|(a, b)| *a -= d * b);
        }
        normalize(&mut x);
        v = x;
    }
    v
}

/// vᵀ·A·v for the Toeplitz kernel A_{nm} = sin(2πW(n−m))/(π(n−m)), via FFT.
pub fn toeplitz_rayleigh(v: &[f64], w: f64) -> f64 {
    let av = toeplitz_apply(v, w);
    v.iter().zip(&av).map(|(a, b)| a * b).sum()
}

/// A·v for the sinc Toeplitz kernel using circulant embedding.
pub fn toeplitz_apply(v: &[f64], w: f64) -> Vec<f64> {
    let n = v.len();
    let kernel = |d: usize| {
        if d == 0 {
            2.0 * w
        } else {
            (2.0 * PI * w * d as f64).sin() / (PI * d as f64)
        }
    };
    let len = 2 * n;
    let mut c = vec![Complex64::new(0.0, 0.0); len];
    for d in 0..n {
        c[d] = Complex64::new(kernel(d), 0.0);
        if d > 0 {
            c[len - d] = Complex64::new(kernel(d), 0.0);
        }
    }
    let mut x = vec![Complex64::new(0.0, 0.0); len];
    for (i, &vi) in v.iter().enumerate() {
        x[i] = Complex64::new(vi, 0.0);
    }
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(len);
    let inv = planner.plan_fft_inverse(len);
    fwd.process(&mut c);
    fwd.process(&mut x);
    for (a, b) in x.iter_mut().zip(&c) {
        *a *= b;
    }
    inv.process(&mut x);
    x[..n].iter().map(|z| z.re / len as f64).collect()
}

/// Fraction of the amplitude filter's weight inside the band ±[c − h, c + h].
///
/// The numerator integrates F_Ω over the band and its mirror image; the
/// denominator is the full-line integral (π/2)·Δt·ΣΩ_m² from Parseval.
pub fn spectral_concentration(
    waveform: &PiecewiseConstantWaveform,
    band_center: f64,
    band_halfwidth: f64,
) -> Result<f64> {
    let energy: f64 = waveform.samples.iter().map(|x| x * x).sum();
    if energy == 0.0 {
        return Err(Error::Parameter("spectral concentration of a zero waveform is undefined".into()));
    }
    if !(band_halfwidth >= 0.0) {
        return param("band half-width must be nonnegative");
    }
    if band_halfwidth.is_infinite() {
        return Ok(1.0);
    }
    let total = 0.5 * PI * waveform.dt * energy;
    let c = band_center.abs();
    let lo = (c - band_halfwidth).max(0.0);
    let hi = c + band_halfwidth;
    let t = waveform.total_time();
    let (nodes, weights) = panel_rule(lo, hi, 0.25 * 2.0 * PI / t, 8);
    let sig = SegmentSignal::piecewise_constant(&waveform.samples, waveform.dt);
    let vals = sig.at_many(&nodes);
    let band: f64 = vals.iter().zip(&weights).map(|(z, w)| 0.25 * z.norm_sqr() * w).sum();
    Ok((2.0 * band / total).clamp(0.0, 1.0))
}
