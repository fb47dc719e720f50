//! Exact Fourier transforms of piecewise signals on a uniform segment grid.
//!
//! A [`SegmentSignal`] is Σ_m c_m·e^{i r_m (t − t_m)} on [t_m, t_m + Δt). Its
//! transform ∫e^{iωt}s(t)dt reduces to Σ_m c_m e^{iωt_m} φ(ω + r_m) with
//! φ(a) = (e^{iaΔt} − 1)/(ia). Piecewise-constant amplitudes use r_m = 0 and
//! e^{±iΘ(t)} with piecewise-linear Θ uses r_m = ±Ω_m.

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;

/// Largest |r_m|Δt for which the Taylor/FFT grid path is used.
const MAX_GRID_PHASE: f64 = 1.5;

#[derive(Debug, Clone)]
pub struct SegmentSignal {
    pub dt: f64,
    pub amps: Vec<Complex64>,
    pub rates: Vec<f64>,
}

/// φ(a) = ∫₀^Δt e^{ias} ds.
#[inline]
pub fn segment_kernel(a: f64, dt: f64) -> Complex64 {
    let h = 0.5 * a * dt;
    let sinc = if h.abs() < 1e-8 { 1.0 - h * h / 6.0 } else { h.sin() / h };
    Complex64::from_polar(dt * sinc, h)
}

impl SegmentSignal {
    pub fn piecewise_constant(samples: &[f64], dt: f64) -> Self {
        Self {
            dt,
            amps: samples.iter().map(|&v| Complex64::new(v, 0.0)).collect(),
            rates: vec![0.0; samples.len()],
        }
    }

    /// e^{sign·iΘ(t)} for Θ piecewise linear with slopes `samples`.
    pub fn phase_exponential(samples: &[f64], dt: f64, sign: f64) -> Self {
        let mut theta = 0.0;
        let mut amps = Vec::with_capacity(samples.len());
        for &om in samples {
            amps.push(Complex64::from_polar(1.0, sign * theta));
            theta += dt * om;
        }
        Self { dt, amps, rates: samples.iter().map(|&v| sign * v).collect() }
    }

    pub fn len(&self) -> usize {
        self.amps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.amps.is_empty()
    }

    /// Transform at one angular frequency, O(N).
    pub fn at(&self, omega: f64) -> Complex64 {
        self.at_with(omega, &self.rate_phasors())
    }

    pub fn at_many(&self, omegas: &[f64]) -> Vec<Complex64> {
        let pre = self.rate_phasors();
        omegas.par_iter().map(|&w| self.at_with(w, &pre)).collect()
    }

    /// e^{i r_m Δt} per segment.
    fn rate_phasors(&self) -> Vec<Complex64> {
        self.rates.iter().map(|r| Complex64::from_polar(1.0, r * self.dt)).collect()
    }

    fn at_with(&self, omega: f64, pre: &[Complex64]) -> Complex64 {
        let dt = self.dt;
        let step = Complex64::from_polar(1.0, omega * dt);
        let mut rot = Complex64::new(1.0, 0.0);
        let mut acc = Complex64::new(0.0, 0.0);
        let all_zero_rate = self.rates.iter().all(|&r| r == 0.0);
        for (m, (c, &r)) in self.amps.iter().zip(&self.rates).enumerate() {
            // Re-anchor the running phasor periodically to bound drift.
            if m % 1024 == 0 {
                rot = Complex64::from_polar(1.0, omega * dt * m as f64);
            }
            if all_zero_rate {
                acc += c * rot;
            } else {
                let a = omega + r;
                let x = a * dt;
                let phi = if x.abs() < 1e-3 {
                    let ix = Complex64::new(0.0, x);
                    dt * (1.0 + ix * (0.5 + ix * (1.0 / 6.0 + ix * (1.0 / 24.0 + ix * (1.0 / 120.0 + ix / 720.0)))))
                } else {
                    (step * pre[m] - 1.0) * Complex64::new(0.0, -1.0 / a)
                };
                acc += c * rot * phi;
            }
            rot *= step;
        }
        if all_zero_rate {
            acc * segment_kernel(omega, dt)
        } else {
            acc
        }
    }

    /// Transform on the DFT grid ω_j = 2πj/(p·N·Δt) for the given integer
    /// indices (|j| < pN/2), via a Taylor expansion of e^{i r_m s} in the
    /// segment and one zero-padded FFT per Taylor order.
    pub fn on_grid(&self, oversample: usize, js: &[i64]) -> Vec<Complex64> {
        let n = self.len();
        let len = oversample.max(1) * n;
        let omega_of = |j: i64| std::f64::consts::TAU * j as f64 / (len as f64 * self.dt);
        let max_phase = self.rates.iter().fold(0.0f64, |a, r| a.max((r * self.dt).abs()));
        if n == 0 {
            return vec![Complex64::new(0.0, 0.0); js.len()];
        }
        if max_phase > MAX_GRID_PHASE {
            let omegas: Vec<f64> = js.iter().map(|&j| omega_of(j)).collect();
            return self.at_many(&omegas);
        }
        let order = taylor_order(max_phase);
        let mut planner = FftPlanner::<f64>::new();
        let fft = planner.plan_fft_inverse(len);
        // D_p(j) = Σ_m c_m (iρ_m)^p / p! e^{2πi jm/len}
        let spectra: Vec<Vec<Complex64>> = (0..=order)
            .into_par_iter()
            .map(|p| {
                let mut buf = vec![Complex64::new(0.0, 0.0); len];
                let fact: f64 = (1..=p).map(|q| q as f64).product();
                for m in 0..n {
                    let rho = Complex64::new(0.0, self.rates[m] * self.dt);
                    buf[m] = self.amps[m] * rho.powu(p as u32) / fact;
                }
                fft.process(&mut buf);
                buf
            })
            .collect();
        js.par_iter()
            .map(|&j| {
                let theta = omega_of(j) * self.dt;
                let idx = j.rem_euclid(len as i64) as usize;
                let nus = unit_moments(theta, order);
                let mut acc = Complex64::new(0.0, 0.0);
                for p in 0..=order {
                    acc += nus[p] * spectra[p][idx];
                }
                acc * self.dt
            })
            .collect()
    }
}

fn taylor_order(max_phase: f64) -> usize {
    if max_phase == 0.0 {
        return 0;
    }
    let mut term = 1.0;
    let mut p = 0;
    while term > 1e-17 && p < 60 {
        p += 1;
        term *= max_phase / p as f64;
    }
    p
}

/// ν_p(θ) = ∫₀¹ u^p e^{iθu} du for p = 0..=order.
///
/// For |θ| ≤ 8 the recurrence ν_{p−1} = (e^{iθ} − iθν_p)/p is run downward
/// from a high start, which damps the start error; above that the upward
/// form is stable.
fn unit_moments(theta: f64, order: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); order + 1];
    let it = Complex64::new(0.0, theta);
    let e = Complex64::from_polar(1.0, theta);
    if theta.abs() <= 8.0 {
        let start = order + 40;
        let mut nu = e / (start as f64 + 1.0);
        for p in (1..=start).rev() {
            if p <= order {
                out[p] = nu;
            }
            nu = (e - it * nu) / p as f64;
        }
        out[0] = nu;
    } else {
        out[0] = (e - 1.0) / it;
        for p in 1..=order {
            out[p] = (e - out[p - 1] * p as f64) / it;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute(sig: &SegmentSignal, omega: f64) -> Complex64 {
        // Fine midpoint quadrature of the continuous signal.
        let sub = 400;
        let h = sig.dt / sub as f64;
        let mut acc = Complex64::new(0.0, 0.0);
        for m in 0..sig.len() {
            for q in 0..sub {
                let s = (q as f64 + 0.5) * h;
                let t = m as f64 * sig.dt + s;
                acc += sig.amps[m] * Complex64::from_polar(h, omega * t + sig.rates[m] * s);
            }
        }
        acc
    }

    #[test]
    fn unit_moments_match_series() {
        for &theta in &[0.0, 1e-9, 0.3, -2.0, 3.14159, 7.9, 8.1, -12.0] {
            let nus = unit_moments(theta, 15);
            for (p, nu) in nus.iter().enumerate() {
                let h = 1.0 / 20000.0;
                let mut acc = Complex64::new(0.0, 0.0);
                for q in 0..20000 {
                    let u = (q as f64 + 0.5) * h;
                    acc += Complex64::from_polar(u.powi(p as i32) * h, theta * u);
                }
                assert!((nu - acc).norm() < 1e-8, "theta={theta} p={p}");
            }
        }
    }

    #[test]
    fn kernel_limit() {
        let k = segment_kernel(0.0, 0.3);
        assert!((k - Complex64::new(0.3, 0.0)).norm() < 1e-15);
        let a = 1e-9;
        let k2 = segment_kernel(a, 0.3);
        assert!((k2 - Complex64::new(0.3, 0.0)).norm() < 1e-9);
    }

    #[test]
    fn direct_matches_fine_quadrature() {
        let om = [0.3, -1.2, 2.0, 0.7, 0.0, 1.1];
        let sig = SegmentSignal::phase_exponential(&om, 0.5, 1.0);
        for w in [0.0, 0.4, -2.3, 5.0] {
            let d = sig.at(w) - brute(&sig, w);
            assert!(d.norm() < 1e-5, "w={w} diff={d}");
        }
    }

    proptest! {
        #[test]
        fn grid_path_matches_direct(
            om in proptest::collection::vec(-2.0f64..2.0, 4..40),
            p in 1usize..4,
            sign in prop_oneof![Just(1.0), Just(-1.0)],
        ) {
            let dt = 0.25;
            let sig = SegmentSignal::phase_exponential(&om, dt, sign);
            let len = (p * om.len()) as i64;
            let js: Vec<i64> = (-(len / 2) + 1..len / 2).collect();
            let fast = sig.on_grid(p, &js);
            for (k, &j) in js.iter().enumerate() {
                let w = std::f64::consts::TAU * j as f64 / (len as f64 * dt);
                let d = (fast[k] - sig.at(w)).norm();
                prop_assert!(d < 1e-12 * (1.0 + sig.at(w).norm()), "j={} d={}", j, d);
            }
        }
    }
}
