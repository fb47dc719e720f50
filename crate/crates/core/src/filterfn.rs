//! Amplitude and dephasing filter functions, their analytic oracles, and the
//! higher-order dephasing filter G_Z.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::io::Write;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::quad::adaptive_gk;
use crate::transform::SegmentSignal;
use crate::waveform::{rotation_angle, PiecewiseConstantWaveform};

#[derive(Debug, Clone)]
pub struct FilterFunctionGrid {
    pub omegas: Vec<f64>,
    pub values: Vec<f64>,
    pub total_time: f64,
}

impl FilterFunctionGrid {
    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "omega_rad_per_s,value")?;
        for (w, v) in self.omegas.iter().zip(&self.values) {
            writeln!(out, "{:e},{:e}", w, v)?;
        }
        Ok(())
    }
}

/// F_Ω(ω) = ¼|∫Ω(t)e^{iωt}dt|² for the zero-order-hold waveform.
pub fn amplitude_ff(waveform: &PiecewiseConstantWaveform, omegas: &[f64]) -> FilterFunctionGrid {
    let sig = waveform.amplitude_signal();
    let values = sig.at_many(omegas).iter().map(|z| 0.25 * z.norm_sqr()).collect();
    FilterFunctionGrid { omegas: omegas.to_vec(), values, total_time: waveform.total_time() }
}

/// F_Ω with the rectangle-rule transform ¼|Δt·Σ_m Ω_m e^{iωmΔt}|².
pub fn amplitude_ff_riemann(waveform: &PiecewiseConstantWaveform, omegas: &[f64]) -> FilterFunctionGrid {
    let sig = waveform.amplitude_signal();
    let values = omegas
        .par_iter()
        .map(|&w| {
            let z = sig.at(w) / crate::transform::segment_kernel(w, waveform.dt) * waveform.dt;
            0.25 * z.norm_sqr()
        })
        .collect();
    FilterFunctionGrid { omegas: omegas.to_vec(), values, total_time: waveform.total_time() }
}

/// Closed-form amplitude filter of the continuous dephasing-robust waveform,
/// (Ω₀λ sin(ωT/2)/(ω² − λ²))², with its limit (Ω₀T/4)² at ω = ±λ.
pub fn dephasing_robust_amplitude_ff(omega0: f64, lambda: f64, total_time: f64, omega: f64) -> f64 {
    let d = omega * omega - lambda * lambda;
    if d.abs() < 1e-9 * lambda * lambda {
        let v = omega0 * total_time / 4.0;
        return v * v;
    }
    let v = omega0 * lambda * (omega * total_time / 2.0).sin() / d;
    v * v
}

/// F_Z(ω) = |∫e^{iωt}sinΘ|² + |∫e^{iωt}cosΘ|² = ½(|E₊|² + |E₋|²) with
/// E_± = ∫e^{iωt ± iΘ(t)}dt, integrated exactly for piecewise-linear Θ.
pub fn dephasing_ff(waveform: &PiecewiseConstantWaveform, omegas: &[f64]) -> FilterFunctionGrid {
    let plus = SegmentSignal::phase_exponential(&waveform.samples, waveform.dt, 1.0);
    let minus = SegmentSignal::phase_exponential(&waveform.samples, waveform.dt, -1.0);
    let values = omegas
        .par_iter()
        .map(|&w| 0.5 * (plus.at(w).norm_sqr() + minus.at(w).norm_sqr()))
        .collect();
    FilterFunctionGrid { omegas: omegas.to_vec(), values, total_time: waveform.total_time() }
}

/// F_Z(0) = |∫e^{iΘ(t)}dt|².
pub fn dephasing_ff_dc(waveform: &PiecewiseConstantWaveform) -> f64 {
    SegmentSignal::phase_exponential(&waveform.samples, waveform.dt, 1.0).at(0.0).norm_sqr()
}

/// F_Z on ω_j = j·2π/(p·T), j = 0..count, through the FFT path, using
/// E₋(ω) = conj(E₊(−ω)).
pub fn dephasing_ff_uniform(waveform: &PiecewiseConstantWaveform, oversample: usize, count: usize) -> FilterFunctionGrid {
    let plus = SegmentSignal::phase_exponential(&waveform.samples, waveform.dt, 1.0);
    let c = count as i64;
    let js: Vec<i64> = (-c + 1..c).collect();
    let e = plus.on_grid(oversample, &js);
    let zero = (c - 1) as usize;
    let t = waveform.total_time();
    let step = 2.0 * PI / (oversample as f64 * t);
    FilterFunctionGrid {
        omegas: (0..count).map(|j| j as f64 * step).collect(),
        values: (0..count).map(|j| 0.5 * (e[zero + j].norm_sqr() + e[zero - j].norm_sqr())).collect(),
        total_time: t,
    }
}

/// F_Z of the continuous-time periodic waveform Ω₀ sin(λt) over M periods:
/// single-period integrals by adaptive quadrature times the Fejér factor.
pub fn dephasing_ff_periodic_oracle(m: usize, lambda: f64, omega0: f64, omegas: &[f64]) -> FilterFunctionGrid {
    let period = 2.0 * PI / lambda;
    let a = omega0 / lambda;
    let values = omegas
        .par_iter()
        .map(|&w| {
            let (s, c) = single_period_integrals(a, lambda, w, period);
            (s.norm_sqr() + c.norm_sqr()) * fejer(m, PI * w / lambda)
        })
        .collect();
    FilterFunctionGrid { omegas: omegas.to_vec(), values, total_time: m as f64 * period }
}

/// (∫₀^P e^{iωt} sinΘ dt, ∫₀^P e^{iωt} cosΘ dt) with Θ = a(1 − cos λt).
pub fn single_period_integrals(a: f64, lambda: f64, omega: f64, period: f64) -> (Complex64, Complex64) {
    let tol = 1e-13 * period;
    let s = adaptive_gk(&|t: f64| Complex64::from_polar((a * (1.0 - (lambda * t).cos())).sin(), omega * t), 0.0, period, tol, 1e-12);
    let c = adaptive_gk(&|t: f64| Complex64::from_polar((a * (1.0 - (lambda * t).cos())).cos(), omega * t), 0.0, period, tol, 1e-12);
    (s, c)
}

/// sin²(Mx)/sin²(x), using the series M²(1 − (M² − 1)δ²/3) within δ of kπ.
pub fn fejer(m: usize, x: f64) -> f64 {
    let mf = m as f64;
    let k = (x / PI).round();
    let delta = x - k * PI;
    if delta.abs() < 1e-4 {
        let d2 = delta * delta;
        return mf * mf * (1.0 - (mf * mf - 1.0) * d2 / 3.0);
    }
    let s = (mf * x).sin() / x.sin();
    s * s
}

/// Equivalent-width weight of the dephasing comb peak at ω = kλ:
/// F_Z(kλ)·2π/T. For the continuous waveform this equals 2πT·J_k(Ω₀/λ)².
pub fn comb_peak_weight(waveform: &PiecewiseConstantWaveform, omega: f64) -> f64 {
    let t = waveform.total_time();
    dephasing_ff(waveform, &[omega]).values[0] * 2.0 * PI / t
}

/// Sampled G_Z(ω, ω′) on a rectangular frequency grid.
#[derive(Debug, Clone)]
pub struct HigherOrderFFGrid {
    pub omegas: Vec<f64>,
    pub omegas_prime: Vec<f64>,
    /// Row-major: values[i * omegas_prime.len() + j] = G_Z(omegas[i], omegas_prime[j]).
    pub values: Vec<Complex64>,
    pub total_time: f64,
}

impl HigherOrderFFGrid {
    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        self.values[i * self.omegas_prime.len() + j]
    }

    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "omega,omega_prime,re,im")?;
        for (i, w) in self.omegas.iter().enumerate() {
            for (j, wp) in self.omegas_prime.iter().enumerate() {
                let g = self.get(i, j);
                writeln!(out, "{:e},{:e},{:e},{:e}", w, wp, g.re, g.im)?;
            }
        }
        Ok(())
    }
}

/// The ordered double sum P(a, b) = Δt²·Σ_{j₁}Σ_{j₂≤j₁} sin(Θ_{j₁} − Θ_{j₂})·e^{iaj₁Δt}·e^{ibj₂Δt},
/// evaluated column by column: prefix sums over j₂ for fixed b, then one FFT
/// over j₁ gives every a on the grid 2π·k/(pT).
struct OrderedSums {
    len: usize,
    /// Needed a-indices (mod len) → position in each column.
    a_pos: HashMap<usize, usize>,
    cols: HashMap<i64, Vec<Complex64>>,
}

impl OrderedSums {
    fn build(waveform: &PiecewiseConstantWaveform, oversample: usize, a_idx: &[i64], b_idx: &[i64]) -> Self {
        let n = waveform.n();
        let len = n * oversample;
        let dt = waveform.dt;
        let theta = rotation_angle(waveform);
        let (sin_t, cos_t): (Vec<f64>, Vec<f64>) = theta[..n].iter().map(|t| t.sin_cos()).unzip();
        let mut a_sorted: Vec<usize> = a_idx.iter().map(|&a| a.rem_euclid(len as i64) as usize).collect();
        a_sorted.sort_unstable();
        a_sorted.dedup();
        let a_pos: HashMap<usize, usize> = a_sorted.iter().enumerate().map(|(p, &a)| (a, p)).collect();
        let mut b_sorted = b_idx.to_vec();
        b_sorted.sort_unstable();
        b_sorted.dedup();
        let mut planner = FftPlanner::<f64>::new();
        let fft = planner.plan_fft_inverse(len);
        let cols: HashMap<i64, Vec<Complex64>> = b_sorted
            .par_iter()
            .map(|&b| {
                let step = 2.0 * PI * b as f64 / len as f64;
                let mut hc = Complex64::new(0.0, 0.0);
                let mut hs = Complex64::new(0.0, 0.0);
                let mut buf = vec![Complex64::new(0.0, 0.0); len];
                for j in 0..n {
                    let e = Complex64::from_polar(1.0, step * j as f64);
                    hc += e * cos_t[j];
                    hs += e * sin_t[j];
                    buf[j] = hc * sin_t[j] - hs * cos_t[j];
                }
                fft.process(&mut buf);
                let col = a_sorted.iter().map(|&a| buf[a] * dt * dt).collect();
                (b, col)
            })
            .collect();
        Self { len, a_pos, cols }
    }

    fn get(&self, a: i64, b: i64) -> Complex64 {
        let ai = a.rem_euclid(self.len as i64) as usize;
        self.cols[&b][self.a_pos[&ai]]
    }
}

fn grid_index(omega: f64, step: f64, half: i64) -> Result<i64> {
    let x = omega / step;
    let j = x.round();
    if (x - j).abs() > 1e-6 || j.abs() as i64 >= half {
        return Err(Error::Grid(format!(
            "frequency {omega} rad/s is not on the DFT grid with spacing {step} rad/s"
        )));
    }
    Ok(j as i64)
}

/// G_Z on the grid ω = 2πj/T using the discrete (left-endpoint) sums.
pub fn higher_order_ff(waveform: &PiecewiseConstantWaveform, omegas: &[f64], omegas_prime: &[f64]) -> Result<HigherOrderFFGrid> {
    higher_order_ff_oversampled(waveform, omegas, omegas_prime, 1)
}

/// G_Z(ω, ω′) = P(ω,−ω)P(ω′,−ω′) + P(ω,ω′)[P(−ω,−ω′) + P(−ω′,−ω)], on the
/// zero-padded grid ω = 2πj/(pT).
pub fn higher_order_ff_oversampled(
    waveform: &PiecewiseConstantWaveform,
    omegas: &[f64],
    omegas_prime: &[f64],
    oversample: usize,
) -> Result<HigherOrderFFGrid> {
    let p = oversample.max(1);
    let len = (waveform.n() * p) as i64;
    let t = waveform.total_time();
    let step = 2.0 * PI / (p as f64 * t);
    let half = (len + 1) / 2;
    let wi: Vec<i64> = omegas.iter().map(|&w| grid_index(w, step, half)).collect::<Result<_>>()?;
    let wj: Vec<i64> = omegas_prime.iter().map(|&w| grid_index(w, step, half)).collect::<Result<_>>()?;
    let mut idx: Vec<i64> = Vec::new();
    for &k in wi.iter().chain(&wj) {
        idx.push(k);
        idx.push(-k);
    }
    let sums = OrderedSums::build(waveform, p, &idx, &idx);
    let mut values = Vec::with_capacity(wi.len() * wj.len());
    for &a in &wi {
        for &b in &wj {
            let g = sums.get(a, -a) * sums.get(b, -b) + sums.get(a, b) * (sums.get(-a, -b) + sums.get(-b, -a));
            values.push(g);
        }
    }
    Ok(HigherOrderFFGrid { omegas: omegas.to_vec(), omegas_prime: omegas_prime.to_vec(), values, total_time: t })
}

/// Quadruple Riemann sum for G_Z, O(N⁴). Reference implementation for tests.
pub fn higher_order_ff_brute(waveform: &PiecewiseConstantWaveform, omega: f64, omega_prime: f64) -> Complex64 {
    let n = waveform.n();
    let dt = waveform.dt;
    let th = rotation_angle(waveform);
    let e = |w: f64, j: usize| Complex64::from_polar(1.0, w * j as f64 * dt);
    let mut acc = Complex64::new(0.0, 0.0);
    for j1 in 0..n {
        for j2 in 0..=j1 {
            let s12 = (th[j1] - th[j2]).sin();
            if s12 == 0.0 {
                continue;
            }
            for j3 in 0..n {
                for j4 in 0..=j3 {
                    let s34 = (th[j3] - th[j4]).sin();
                    let phase = e(omega, j1) * e(-omega, j2) * e(omega_prime, j3) * e(-omega_prime, j4)
                        + e(omega, j1) * e(-omega, j3) * e(omega_prime, j2) * e(-omega_prime, j4)
                        + e(omega, j1) * e(-omega, j4) * e(omega_prime, j2) * e(-omega_prime, j3);
                    acc += phase * (s12 * s34);
                }
            }
        }
    }
    acc * dt.powi(4)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::slepian::dpss;
    use crate::waveform::{dephasing_robust, modulated_from_set, AmplitudeRule};
    use crate::TAU;
    use proptest::prelude::*;

    #[test]
    fn zero_control_dephasing_filter() {
        let w = PiecewiseConstantWaveform::zeros(100, 1e-7).unwrap();
        let t = w.total_time();
        let om = [0.0, 1e4, 3.3e5, 2e6];
        let ff = dephasing_ff(&w, &om);
        assert!((ff.values[0] - t * t).abs() < 1e-12 * t * t);
        for (o, v) in om[1..].iter().zip(&ff.values[1..]) {
            let want = 4.0 * (o * t / 2.0).sin().powi(2) / (o * o);
            assert!((v - want).abs() < 1e-10 * t * t);
        }
        let fa = amplitude_ff(&w, &om);
        assert!(fa.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn amplitude_ff_at_modulation_frequency() {
        let (w, p) = dephasing_robust(100e-6, 10, 1, 10000, AmplitudeRule::BesselRoot).unwrap();
        let got = amplitude_ff(&w, &[p.lambda]).values[0];
        let want = (p.omega0 * w.total_time() / 4.0).powi(2);
        assert!((got / want - 1.0).abs() < 1e-3);
        assert!((dephasing_robust_amplitude_ff(p.omega0, p.lambda, w.total_time(), p.lambda) - want).abs() < 1e-9 * want);
    }

    #[test]
    fn fejer_limits() {
        assert!((fejer(7, 0.0) - 49.0).abs() < 1e-12);
        assert!((fejer(7, 3.0 * PI) - 49.0).abs() < 1e-12);
        let x = 0.3;
        assert!((fejer(5, x) - ((5.0 * x).sin() / x.sin()).powi(2)).abs() < 1e-12);
        let near = PI + 2e-4;
        assert!((fejer(5, near) - ((5.0 * near).sin() / near.sin()).powi(2)).abs() < 1e-6);
    }

    #[test]
    fn single_period_cos_integral_at_dc() {
        let lambda = TAU * 0.1e6;
        let a = 2.0;
        let (_, c) = single_period_integrals(a, lambda, 0.0, TAU / lambda);
        let want = TAU / lambda * a.cos() * crate::special::bessel_j0(a);
        assert!((c.re - want).abs() < 1e-10 * (TAU / lambda));
        assert!(c.im.abs() < 1e-10 * (TAU / lambda));
    }

    #[test]
    fn periodic_oracle_agrees_with_sampled() {
        let (w, p) = dephasing_robust(20e-6, 4, 2, 4000, AmplitudeRule::BesselRoot).unwrap();
        let om: Vec<f64> = (0..40).map(|k| (k as f64 + 0.37) * p.lambda / 3.0).collect();
        let a = dephasing_ff(&w, &om);
        let b = dephasing_ff_periodic_oracle(p.periods, p.lambda, p.omega0, &om);
        for i in 0..om.len() {
            if b.values[i] > 1e-4 * b.values.iter().cloned().fold(0.0, f64::max) {
                assert!((a.values[i] / b.values[i] - 1.0).abs() < 0.01, "i={i}");
            }
        }
    }

    #[test]
    fn uniform_path_matches_direct() {
        let set = dpss(500, 1.0 / 500.0, 1).unwrap();
        let w = modulated_from_set(&set, TAU * 5e6, TAU * 2e6, 1e-8, 500);
        let g = dephasing_ff_uniform(&w, 4, 300);
        let d = dephasing_ff(&w, &g.omegas);
        for (x, y) in g.values.iter().zip(&d.values) {
            assert!((x - y).abs() < 1e-10 * w.total_time().powi(2));
        }
    }

    #[test]
    fn parseval_over_dft_band() {
        let samples: Vec<f64> = (0..64).map(|m| ((m * 37 % 11) as f64 - 5.0) * 1e5).collect();
        let w = PiecewiseConstantWaveform::new(samples.clone(), 1e-7).unwrap();
        // Trapezoid on a periodic integrand over one full period is spectrally exact.
        let nyq = PI / w.dt;
        let k = 4096;
        let om: Vec<f64> = (0..k).map(|i| -nyq + 2.0 * nyq * i as f64 / k as f64).collect();
        let ff = amplitude_ff_riemann(&w, &om);
        let integral: f64 = ff.values.iter().sum::<f64>() * 2.0 * nyq / k as f64;
        let want = w.dt / 4.0 * samples.iter().map(|x| x * x).sum::<f64>();
        assert!((integral / (2.0 * PI) / want - 1.0).abs() < 1e-6);
    }

    #[test]
    fn gz_rejects_off_grid() {
        let w = PiecewiseConstantWaveform::new(vec![1.0; 8], 1.0).unwrap();
        assert!(matches!(higher_order_ff(&w, &[0.1], &[0.0]), Err(Error::Grid(_))));
    }

    #[test]
    fn gz_conjugate_symmetry() {
        let set = dpss(64, 1.5 / 64.0, 1).unwrap();
        let w = modulated_from_set(&set, 2.0, TAU * 4.0 / 64.0, 1.0, 64);
        let step = TAU / w.total_time();
        let om: Vec<f64> = (-6..=6).map(|j| j as f64 * step).collect();
        let g = higher_order_ff(&w, &om, &om).unwrap();
        let n = om.len();
        for i in 0..n {
            for j in 0..n {
                let a = g.get(i, j);
                let b = g.get(n - 1 - i, n - 1 - j).conj();
                assert!((a - b).norm() <= 1e-10 * a.norm().max(1e-300));
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn gz_matches_brute_force(
            samples in proptest::collection::vec(-3.0f64..3.0, 8..24),
            p in 1usize..3,
        ) {
            let w = PiecewiseConstantWaveform::new(samples, 0.37).unwrap();
            let step = TAU / (p as f64 * w.total_time());
            let om: Vec<f64> = [-2i64, 0, 1, 3].iter().map(|&j| j as f64 * step).collect();
            let g = higher_order_ff_oversampled(&w, &om, &om, p).unwrap();
            for (i, &a) in om.iter().enumerate() {
                for (j, &b) in om.iter().enumerate() {
                    let want = higher_order_ff_brute(&w, a, b);
                    let got = g.get(i, j);
                    prop_assert!((got - want).norm() <= 1e-10 * want.norm().max(1e-12));
                }
            }
        }
    }
}
