//! Spectrum models and Gaussian noise synthesis.
//!
//! One-sided PSDs S(ω), ω ≥ 0, with correlation C(τ) = (1/π)∫₀^∞ S(ω)cos(ωτ)dω.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::quad::panel_rule;
use crate::TAU;

/// All frequencies in rad/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpectrumModel {
    Zero,
    /// S = A below ω_h, zero above.
    FlatCutoff { a_omega: f64, omega_h: f64 },
    /// S = C·A/ω_l below ω_l, C·A/ω up to ω_h, zero above.
    OneOverF { c: f64, a_z: f64, omega_l: f64, omega_h: f64 },
    /// Static offset μ (no stochastic part).
    DcDelta { mu_z: f64 },
}

impl SpectrumModel {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SpectrumModel::Zero => Ok(()),
            SpectrumModel::FlatCutoff { a_omega, omega_h } => {
                if !(a_omega >= 0.0) || !(omega_h > 0.0) {
                    return param("flat_cutoff needs a_omega >= 0 and omega_h > 0");
                }
                Ok(())
            }
            SpectrumModel::OneOverF { c, a_z, omega_l, omega_h } => {
                if !(c >= 0.0 && a_z >= 0.0) {
                    return param("one_over_f needs c >= 0 and a_z >= 0");
                }
                if !(omega_l > 0.0 && omega_l < omega_h) {
                    return param("one_over_f needs 0 < omega_l < omega_h");
                }
                Ok(())
            }
            SpectrumModel::DcDelta { mu_z } => {
                if !mu_z.is_finite() {
                    return param("dc_delta needs a finite mu_z");
                }
                Ok(())
            }
        }
    }

    /// Static mean carried alongside the stochastic part.
    pub fn mean(&self) -> f64 {
        match *self {
            SpectrumModel::DcDelta { mu_z } => mu_z,
            _ => 0.0,
        }
    }

    /// Highest frequency with nonzero density (0 if none).
    pub fn cutoff(&self) -> f64 {
        match *self {
            SpectrumModel::FlatCutoff { a_omega, omega_h } if a_omega > 0.0 => omega_h,
            SpectrumModel::OneOverF { c, a_z, omega_h, .. } if c * a_z > 0.0 => omega_h,
            _ => 0.0,
        }
    }

    pub fn has_stochastic_part(&self) -> bool {
        self.cutoff() > 0.0
    }

    /// Points where S is not smooth, for splitting quadrature.
    pub fn breakpoints(&self) -> Vec<f64> {
        match *self {
            SpectrumModel::FlatCutoff { omega_h, .. } => vec![0.0, omega_h],
            SpectrumModel::OneOverF { omega_l, omega_h, .. } => vec![0.0, omega_l, omega_h],
            _ => Vec::new(),
        }
    }

    /// Variance (1/π)∫₀^∞ S dω of the stochastic part.
    pub fn variance(&self) -> f64 {
        match *self {
            SpectrumModel::FlatCutoff { a_omega, omega_h } => a_omega * omega_h / std::f64::consts::PI,
            SpectrumModel::OneOverF { c, a_z, omega_l, omega_h } => {
                c * a_z * (1.0 + (omega_h / omega_l).ln()) / std::f64::consts::PI
            }
            _ => 0.0,
        }
    }
}

pub fn psd_eval(model: &SpectrumModel, omega: f64) -> f64 {
    let w = omega.abs();
    match *model {
        SpectrumModel::FlatCutoff { a_omega, omega_h } => {
            if w <= omega_h {
                a_omega
            } else {
                0.0
            }
        }
        SpectrumModel::OneOverF { c, a_z, omega_l, omega_h } => {
            if w < omega_l {
                c * a_z / omega_l
            } else if w <= omega_h {
                c * a_z / w
            } else {
                0.0
            }
        }
        _ => 0.0,
    }
}

/// Integral (1/π)∫₀^∞ S(ω)·f(ω) dω with panels no wider than `max_panel`.
pub fn overlap<F: Fn(&[f64]) -> Vec<f64>>(model: &SpectrumModel, max_panel: f64, f: F) -> f64 {
    let bp = model.breakpoints();
    if bp.is_empty() || !model.has_stochastic_part() {
        return 0.0;
    }
    let mut nodes = Vec::new();
    let mut weights = Vec::new();
    for pair in bp.windows(2) {
        let (lo, hi) = (pair[0], pair[1]);
        // Geometric sub-segments keep 1/ω regions resolved near their low end.
        let mut a = lo;
        while a < hi {
            let b = if a == 0.0 || !matches!(model, SpectrumModel::OneOverF { .. }) { hi } else { (2.0 * a).min(hi) };
            let (x, w) = panel_rule(a, b, max_panel.min((b - a) / 4.0), 8);
            nodes.extend(x);
            weights.extend(w);
            a = b;
        }
    }
    let vals = f(&nodes);
    let s: f64 = nodes
        .iter()
        .zip(&weights)
        .zip(&vals)
        .map(|((&x, &w), &v)| w * psd_eval(model, x) * v)
        .sum();
    s / std::f64::consts::PI
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseRealization {
    pub samples: Vec<f64>,
    pub mean: f64,
    pub seed: u64,
    pub index: u64,
}

/// Harmonic synthesis β_m = μ + Σ_j √(2S(ω_j)Δω/2π)(A_j cos ω_j t_m + B_j sin ω_j t_m)
/// on ω_j = j·2π/(p·N·Δt), j = 1..pN/2, with independent standard normals
/// A_j, B_j drawn from the ChaCha stream (seed, index).
pub fn sample_process(model: &SpectrumModel, n: usize, dt: f64, seed: u64, index: u64) -> Result<NoiseRealization> {
    sample_process_oversampled(model, n, dt, seed, index, 1)
}

pub fn sample_process_oversampled(
    model: &SpectrumModel,
    n: usize,
    dt: f64,
    seed: u64,
    index: u64,
    oversample: usize,
) -> Result<NoiseRealization> {
    model.validate()?;
    let nyquist = std::f64::consts::PI / dt;
    if model.cutoff() > nyquist * (1.0 + 1e-12) {
        return Err(Error::Parameter(format!(
            "spectrum cutoff {} rad/s exceeds the Nyquist frequency {} rad/s",
            model.cutoff(),
            nyquist
        )));
    }
    let mu = model.mean();
    if !model.has_stochastic_part() {
        return Ok(NoiseRealization { samples: vec![mu; n], mean: mu, seed, index });
    }
    let len = oversample.max(1) * n;
    let dw = TAU / (len as f64 * dt);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let mut buf = vec![Complex64::new(0.0, 0.0); len];
    for (j, slot) in buf.iter_mut().enumerate().take(len / 2 + 1).skip(1) {
        let a: f64 = StandardNormal.sample(&mut rng);
        let b: f64 = StandardNormal.sample(&mut rng);
        let amp = (psd_eval(model, j as f64 * dw) * dw / std::f64::consts::PI).sqrt();
        *slot = Complex64::new(amp * a, -amp * b);
    }
    let mut planner = FftPlanner::<f64>::new();
    planner.plan_fft_inverse(len).process(&mut buf);
    let samples = buf[..n].iter().map(|z| mu + z.re).collect();
    Ok(NoiseRealization { samples, mean: mu, seed, index })
}

/// Free-induction dephasing exponent χ(T) = (1/π)∫₀^∞ S(ω)·4sin²(ωT/2)/ω² dω.
pub fn free_induction_chi(model: &SpectrumModel, t: f64) -> f64 {
    overlap(model, TAU / (8.0 * t), |ws| {
        ws.iter()
            .map(|&w| {
                let h = 0.5 * w * t;
                if h.abs() < 1e-8 {
                    t * t
                } else {
                    (h.sin() / h).powi(2) * t * t
                }
            })
            .collect()
    })
}

/// Time at which the Ramsey coherence e^{−2χ(T)} falls to 1/e, i.e. χ(T₂) = 1/2.
/// Returns +∞ if that does not happen before `t_max`.
pub fn t2_estimate(model: &SpectrumModel, t_max: f64) -> Result<f64> {
    model.validate()?;
    if let SpectrumModel::DcDelta { .. } = model {
        return param("a static detuning has no stochastic part and no T2");
    }
    if !model.has_stochastic_part() {
        return Ok(f64::INFINITY);
    }
    let f = |t: f64| 2.0 * free_induction_chi(model, t) - 1.0;
    let mut lo = 1e-12_f64.min(t_max);
    if f(lo) >= 0.0 {
        return Ok(lo);
    }
    let mut hi = lo;
    loop {
        hi = (hi * 1.1).min(t_max);
        if f(hi) >= 0.0 {
            break;
        }
        if hi >= t_max {
            return Ok(f64::INFINITY);
        }
        lo = hi;
    }
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if f(mid) >= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo < 1e-10 * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mhz_to_rad;

    fn flat() -> SpectrumModel {
        SpectrumModel::FlatCutoff { a_omega: 1.04e-11, omega_h: mhz_to_rad(2.0) }
    }

    fn one_over_f(c: f64) -> SpectrumModel {
        SpectrumModel::OneOverF { c, a_z: 1e8, omega_l: mhz_to_rad(0.01), omega_h: mhz_to_rad(2.0) }
    }

    #[test]
    fn psd_values() {
        assert_eq!(psd_eval(&flat(), mhz_to_rad(1.0)), 1.04e-11);
        assert_eq!(psd_eval(&flat(), mhz_to_rad(2.5)), 0.0);
        let m = one_over_f(3.0);
        let wl = mhz_to_rad(0.01);
        assert!((psd_eval(&m, wl) - 3.0 * 1e8 / wl).abs() < 1e-9);
        assert!((psd_eval(&m, wl * (1.0 - 1e-12)) - psd_eval(&m, wl)).abs() < 1e-6 * psd_eval(&m, wl));
        assert_eq!(psd_eval(&m, mhz_to_rad(3.0)), 0.0);
    }

    #[test]
    fn static_and_zero_models() {
        let d = SpectrumModel::DcDelta { mu_z: mhz_to_rad(0.1) };
        let r = sample_process(&d, 16, 1e-8, 1, 2).unwrap();
        assert!(r.samples.iter().all(|&x| x == mhz_to_rad(0.1)));
        let z = sample_process(&SpectrumModel::Zero, 16, 1e-8, 1, 2).unwrap();
        assert!(z.samples.iter().all(|&x| x == 0.0));
        let f0 = SpectrumModel::FlatCutoff { a_omega: 0.0, omega_h: 1.0 };
        assert!(sample_process(&f0, 8, 1e-3, 0, 0).unwrap().samples.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn nyquist_violation() {
        let r = sample_process(&flat(), 100, 1e-6, 0, 0);
        assert!(matches!(r, Err(Error::Parameter(_))));
    }

    #[test]
    fn deterministic_streams() {
        let a = sample_process(&flat(), 256, 1e-8, 42, 7).unwrap();
        let b = sample_process(&flat(), 256, 1e-8, 42, 7).unwrap();
        let c = sample_process(&flat(), 256, 1e-8, 42, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn lag_zero_variance_and_mean() {
        let model = flat();
        let n = 512;
        let dt = 1e-8;
        let reps = 2000;
        let mut var = 0.0;
        let mut mean_at_t = 0.0;
        for i in 0..reps {
            let r = sample_process(&model, n, dt, 9, i).unwrap();
            var += r.samples.iter().map(|x| x * x).sum::<f64>() / n as f64;
            mean_at_t += r.samples[100];
        }
        var /= reps as f64;
        mean_at_t /= reps as f64;
        let want = model.variance();
        assert!((var / want - 1.0).abs() < 0.05, "{var} vs {want}");
        let se = (want / reps as f64).sqrt();
        assert!(mean_at_t.abs() < 3.0 * se);
    }

    #[test]
    fn averaged_periodogram_matches_flat_level() {
        let model = flat();
        let n = 1000;
        let dt = 1e-8;
        let t = n as f64 * dt;
        let reps = 500;
        let bins = [10usize, 12, 15];
        let mut acc = [0.0; 3];
        for i in 0..reps {
            let r = sample_process(&model, n, dt, 3, i).unwrap();
            for (slot, &j) in acc.iter_mut().zip(&bins) {
                let w = TAU * j as f64 / t;
                let z: Complex64 = r.samples.iter().enumerate().map(|(m, x)| Complex64::from_polar(x * dt, w * m as f64 * dt)).sum();
                // E|∫β e^{iωt}|² = S·T for a one-sided S with this normalization.
                *slot += z.norm_sqr() / t;
            }
        }
        for a in acc {
            let est = a / reps as f64;
            assert!((est / 1.04e-11 - 1.0).abs() < 0.1, "{est}");
        }
    }

    #[test]
    fn t2_from_one_over_f() {
        let t2 = t2_estimate(&one_over_f(299.1), 1e-3).unwrap();
        assert!(t2 > 4e-6 / 1.5 && t2 < 4e-6 * 1.5, "{t2}");
        let t2b = t2_estimate(&one_over_f(4.0 * 299.1), 1e-3).unwrap();
        assert!(t2b < t2);
        assert_eq!(t2_estimate(&SpectrumModel::Zero, 1e-3).unwrap(), f64::INFINITY);
        assert!(t2_estimate(&SpectrumModel::DcDelta { mu_z: 1.0 }, 1e-3).is_err());
    }
}
