//! Bessel functions of the first kind and the zeros of J₀.

use std::f64::consts::PI;

/// J_n(x) for integer order n.
///
/// Uses the periodic integral J_n(x) = (1/2π)∫cos(nτ − x sin τ)dτ with the
/// trapezoid rule, which converges geometrically once the node count clears
/// the turning point |x| + n by a few Airy widths.
pub fn bessel_j(n: i32, x: f64) -> f64 {
    if n < 0 {
        let v = bessel_j(-n, x);
        return if n % 2 == 0 { v } else { -v };
    }
    let nf = n as f64;
    let ax = x.abs();
    let k = (nf + ax + 20.0 * ax.cbrt() + 32.0).ceil() as usize;
    let step = 2.0 * PI / k as f64;
    let mut sum = 0.0;
    for i in 0..k {
        let tau = step * i as f64;
        sum += (nf * tau - x * tau.sin()).cos();
    }
    sum / k as f64
}

pub fn bessel_j0(x: f64) -> f64 {
    bessel_j(0, x)
}

/// The first `n` positive zeros of J₀ in increasing order.
pub fn bessel_j0_roots(n: usize) -> Vec<f64> {
    (1..=n).map(bessel_j0_root).collect()
}

/// The k-th positive zero of J₀ (k ≥ 1).
pub fn bessel_j0_root(k: usize) -> f64 {
    assert!(k >= 1, "root index starts at 1");
    // McMahon's leading terms put the guess well inside a unit bracket.
    let beta = (k as f64 - 0.25) * PI;
    let guess = beta + 1.0 / (8.0 * beta);
    let (mut lo, mut hi) = (guess - 0.5, guess + 0.5);
    let mut flo = bessel_j0(lo);
    debug_assert!(flo * bessel_j0(hi) < 0.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let fm = bessel_j0(mid);
        if fm == 0.0 {
            return mid;
        }
        if (fm < 0.0) == (flo < 0.0) {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}
