//! Single-qubit propagation under control and noise, survival probabilities,
//! the tomographic estimator, and perturbative error-vector diagnostics.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::filterfn::dephasing_ff_dc;
use crate::noisegen::{overlap, sample_process_oversampled, SpectrumModel};
use crate::quad::pairwise_sum;
use crate::transform::{segment_kernel, SegmentSignal};
use crate::waveform::{rotation_angle, PiecewiseConstantWaveform};
use crate::TAU;

type Mat2 = [[Complex64; 2]; 2];

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QubitPropagator {
    pub u: Mat2,
}

impl QubitPropagator {
    pub fn identity() -> Self {
        Self { u: [[ONE, ZERO], [ZERO, ONE]] }
    }

    /// ‖U†U − I‖ (max entry).
    pub fn unitarity_error(&self) -> f64 {
        let u = &self.u;
        let mut err = 0.0f64;
        for i in 0..2 {
            for j in 0..2 {
                let s = u[0][i].conj() * u[0][j] + u[1][i].conj() * u[1][j];
                let want = if i == j { ONE } else { ZERO };
                err = err.max((s - want).norm());
            }
        }
        err
    }

    /// |⟨ψ|U|ψ⟩|².
    pub fn survival(&self, psi: [Complex64; 2]) -> f64 {
        let u = &self.u;
        let a = [u[0][0] * psi[0] + u[0][1] * psi[1], u[1][0] * psi[0] + u[1][1] * psi[1]];
        (psi[0].conj() * a[0] + psi[1].conj() * a[1]).norm_sqr()
    }

    /// Survival of the +1 eigenstates of σ₁, σ₂, σ₃.
    pub fn survival_triple(&self) -> [f64; 3] {
        let r = std::f64::consts::FRAC_1_SQRT_2;
        [
            self.survival([Complex64::new(r, 0.0), Complex64::new(r, 0.0)]),
            self.survival([Complex64::new(r, 0.0), Complex64::new(0.0, r)]),
            self.survival([ONE, ZERO]),
        ]
    }
}

fn mul(a: &Mat2, b: &Mat2) -> Mat2 {
    let mut c = [[ZERO; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    c
}

/// U(T) = Π_m exp(−iΔt[(1 + β_Ω,m)Ω_m/2·σ₁ + β_z,m·σ₃]), later segments on the left.
pub fn propagate(waveform: &PiecewiseConstantWaveform, beta_omega: &[f64], beta_z: &[f64]) -> Result<QubitPropagator> {
    let n = waveform.n();
    for len in [beta_omega.len(), beta_z.len()] {
        if len != n {
            return Err(Error::LengthMismatch { expected: n, got: len });
        }
    }
    let dt = waveform.dt;
    let mut u = QubitPropagator::identity().u;
    for m in 0..n {
        let hx = 0.5 * waveform.samples[m] * (1.0 + beta_omega[m]);
        let hz = beta_z[m];
        let norm = (hx * hx + hz * hz).sqrt();
        let theta = dt * norm;
        let c = theta.cos();
        let s = if theta < 1e-8 { dt * (1.0 - theta * theta / 6.0) } else { theta.sin() / norm };
        let seg = [
            [Complex64::new(c, -s * hz), Complex64::new(0.0, -s * hx)],
            [Complex64::new(0.0, -s * hx), Complex64::new(c, s * hz)],
        ];
        u = mul(&seg, &u);
    }
    Ok(QubitPropagator { u })
}

/// Ensemble-averaged survival probabilities for the three initial states.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SurvivalTriple {
    pub p: [f64; 3],
    pub p_err: [f64; 3],
    pub n_realizations: usize,
    /// Mean and standard error of the per-realization estimator ½(1 + p₁ − p₂ − p₃).
    pub estimator: f64,
    pub estimator_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationOptions {
    pub n_realizations: usize,
    pub seed: u64,
    /// Zero-padding factor for the noise harmonic grid.
    pub noise_oversample: usize,
    /// Binomial shots per realization and state; `None` uses exact probabilities.
    pub shots: Option<u64>,
    /// Static detuning added to every dephasing realization (rad/s).
    pub detuning: f64,
}

impl SimulationOptions {
    pub fn new(n_realizations: usize, seed: u64) -> Self {
        Self { n_realizations, seed, noise_oversample: 1, shots: None, detuning: 0.0 }
    }
}

/// Streams for amplitude and dephasing noise are separated by seed offset so
/// the amplitude realizations do not depend on the dephasing model.
const DEPHASING_SEED_OFFSET: u64 = 0x9E37_79B9_7F4A_7C15;
const SHOT_SEED_OFFSET: u64 = 0xD1B5_4A32_D192_ED03;

/// Per-realization survival probabilities.
pub fn survival_samples(
    waveform: &PiecewiseConstantWaveform,
    amp_model: &SpectrumModel,
    deph_model: &SpectrumModel,
    opts: &SimulationOptions,
) -> Result<Vec<[f64; 3]>> {
    let n = waveform.n();
    let dt = waveform.dt;
    (0..opts.n_realizations as u64)
        .into_par_iter()
        .map(|r| {
            let a = sample_process_oversampled(amp_model, n, dt, opts.seed, r, opts.noise_oversample)?;
            let z = sample_process_oversampled(
                deph_model,
                n,
                dt,
                opts.seed.wrapping_add(DEPHASING_SEED_OFFSET),
                r,
                opts.noise_oversample,
            )?;
            let zs: Vec<f64> = z.samples.iter().map(|v| v + opts.detuning).collect();
            let mut p = propagate(waveform, &a.samples, &zs)?.survival_triple();
            if let Some(shots) = opts.shots {
                let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(SHOT_SEED_OFFSET));
                rng.set_stream(r);
                for v in p.iter_mut() {
                    let b = Binomial::new(shots, v.clamp(0.0, 1.0)).map_err(|e| Error::Parameter(e.to_string()))?;
                    *v = b.sample(&mut rng) as f64 / shots as f64;
                }
            }
            Ok(p)
        })
        .collect()
}

pub fn survival_probabilities(
    waveform: &PiecewiseConstantWaveform,
    amp_model: &SpectrumModel,
    deph_model: &SpectrumModel,
    opts: &SimulationOptions,
) -> Result<SurvivalTriple> {
    if opts.n_realizations == 0 {
        return Err(Error::Parameter("need at least one realization".into()));
    }
    let samples = survival_samples(waveform, amp_model, deph_model, opts)?;
    Ok(summarize(&samples))
}

pub fn summarize(samples: &[[f64; 3]]) -> SurvivalTriple {
    let n = samples.len();
    let (mut p, mut p_err) = ([0.0; 3], [0.0; 3]);
    for i in 0..3 {
        let col: Vec<f64> = samples.iter().map(|s| s[i]).collect();
        let (m, se) = mean_and_se(&col);
        p[i] = m;
        p_err[i] = se;
    }
    let est: Vec<f64> = samples.iter().map(|s| 0.5 * (1.0 + s[0] - s[1] - s[2])).collect();
    let (estimator, estimator_err) = mean_and_se(&est);
    SurvivalTriple { p, p_err, n_realizations: n, estimator, estimator_err }
}

/// Mean and standard error with order-independent pairwise sums.
pub fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = pairwise_sum(v) / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let dev: Vec<f64> = v.iter().map(|x| (x - mean).powi(2)).collect();
    let var = pairwise_sum(&dev) / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// 𝒫 = ½(1 + p₁ − p₂ − p₃) with its standard error.
pub fn tomographic_estimator(triple: &SurvivalTriple) -> (f64, f64) {
    let p = triple.p;
    let value = 0.5 * (1.0 + p[0] - p[1] - p[2]);
    (value, triple.estimator_err)
}

/// (a₁, a₂, a₃) to first order: ½∫Ωβ_Ω, ∫sinΘ·β_z, ∫cosΘ·β_z, integrated
/// exactly per segment.
pub fn error_vector_first_order(waveform: &PiecewiseConstantWaveform, beta_omega: &[f64], beta_z: &[f64]) -> Result<[f64; 3]> {
    let n = waveform.n();
    for len in [beta_omega.len(), beta_z.len()] {
        if len != n {
            return Err(Error::LengthMismatch { expected: n, got: len });
        }
    }
    let dt = waveform.dt;
    let a1 = 0.5 * dt * waveform.samples.iter().zip(beta_omega).map(|(o, b)| o * b).sum::<f64>();
    let mut e = Complex64::new(0.0, 0.0);
    let mut theta = 0.0;
    for m in 0..n {
        let om = waveform.samples[m];
        e += Complex64::from_polar(beta_z[m], theta) * segment_kernel(om, dt);
        theta += dt * om;
    }
    Ok([a1, e.im, e.re])
}

/// a₁⁽²⁾ = Δt²·Σ_{j₁}Σ_{j₂<j₁} β_{j₁}β_{j₂}·sin(Θ_{j₁} − Θ_{j₂}), in O(N) via
/// running sums of β cosΘ and β sinΘ.
pub fn magnus_second_order_a1(waveform: &PiecewiseConstantWaveform, beta_z: &[f64]) -> Result<f64> {
    let n = waveform.n();
    if beta_z.len() != n {
        return Err(Error::LengthMismatch { expected: n, got: beta_z.len() });
    }
    let th = rotation_angle(waveform);
    let (mut sc, mut ss) = (0.0, 0.0);
    let mut acc = 0.0;
    for j in 0..n {
        let (s, c) = th[j].sin_cos();
        acc += beta_z[j] * (s * sc - c * ss);
        sc += beta_z[j] * c;
        ss += beta_z[j] * s;
    }
    Ok(acc * waveform.dt * waveform.dt)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasBreakdown {
    pub i_omega: f64,
    pub i_z: f64,
    /// ⟨a₁⁽²⁾²⟩.
    pub a12_sq: f64,
    /// I_Ω − I_Ω² − ⅓I_Ω·I_Z + ⟨a₁⁽²⁾²⟩.
    pub predicted: f64,
}

/// I_Ω = (1/π)∫₀^∞ S_Ω F_Ω dω.
pub fn amplitude_overlap(waveform: &PiecewiseConstantWaveform, model: &SpectrumModel) -> f64 {
    let sig = waveform.amplitude_signal();
    let panel = TAU / (8.0 * waveform.total_time());
    overlap(model, panel, |ws| sig.at_many(ws).iter().map(|z| 0.25 * z.norm_sqr()).collect())
}

/// I_Z = (1/π)∫₀^∞ S_z F_Z dω + μ_z²·F_Z(0).
pub fn dephasing_overlap(waveform: &PiecewiseConstantWaveform, model: &SpectrumModel) -> f64 {
    dephasing_overlap_with_detuning(waveform, model, 0.0)
}

/// I_Z with an extra static detuning added to the model mean.
pub fn dephasing_overlap_with_detuning(waveform: &PiecewiseConstantWaveform, model: &SpectrumModel, detuning: f64) -> f64 {
    let plus = SegmentSignal::phase_exponential(&waveform.samples, waveform.dt, 1.0);
    let minus = SegmentSignal::phase_exponential(&waveform.samples, waveform.dt, -1.0);
    let panel = TAU / (8.0 * waveform.total_time());
    let stochastic = overlap(model, panel, |ws| {
        let a = plus.at_many(ws);
        let b = minus.at_many(ws);
        a.iter().zip(&b).map(|(x, y)| 0.5 * (x.norm_sqr() + y.norm_sqr())).collect()
    });
    let mu = model.mean() + detuning;
    stochastic + mu * mu * dephasing_ff_dc(waveform)
}

/// Overlaps and the predicted estimator. ⟨a₁⁽²⁾²⟩ is exact for a purely static
/// detuning and a Monte-Carlo mean over `opts.n_realizations` otherwise.
pub fn bias_breakdown(
    waveform: &PiecewiseConstantWaveform,
    amp_model: &SpectrumModel,
    deph_model: &SpectrumModel,
    opts: &SimulationOptions,
) -> Result<BiasBreakdown> {
    amp_model.validate()?;
    deph_model.validate()?;
    let i_omega = amplitude_overlap(waveform, amp_model);
    let i_z = dephasing_overlap_with_detuning(waveform, deph_model, opts.detuning);
    let a12_sq = if deph_model.has_stochastic_part() {
        let n = waveform.n();
        let vals: Vec<f64> = (0..opts.n_realizations as u64)
            .into_par_iter()
            .map(|r| {
                let z = sample_process_oversampled(
                    deph_model,
                    n,
                    waveform.dt,
                    opts.seed.wrapping_add(DEPHASING_SEED_OFFSET),
                    r,
                    opts.noise_oversample,
                )?;
                let zs: Vec<f64> = z.samples.iter().map(|v| v + opts.detuning).collect();
                Ok(magnus_second_order_a1(waveform, &zs)?.powi(2))
            })
            .collect::<Result<_>>()?;
        pairwise_sum(&vals) / vals.len().max(1) as f64
    } else {
        let mu = deph_model.mean() + opts.detuning;
        magnus_second_order_a1(waveform, &vec![mu; waveform.n()])?.powi(2)
    };
    let predicted = i_omega - i_omega * i_omega - i_omega * i_z / 3.0 + a12_sq;
    Ok(BiasBreakdown { i_omega, i_z, a12_sq, predicted })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filterfn::higher_order_ff;
    use crate::mhz_to_rad;
    use crate::waveform::{dephasing_robust, AmplitudeRule};
    use proptest::prelude::*;

    #[test]
    fn no_noise_identity_gate() {
        let (w, _) = dephasing_robust(20e-6, 5, 2, 2000, AmplitudeRule::DiscreteNull).unwrap();
        let zeros = vec![0.0; w.n()];
        let u = propagate(&w, &zeros, &zeros).unwrap();
        assert!(u.unitarity_error() < 1e-10);
        for p in u.survival_triple() {
            assert!((p - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn free_detuning_rotation() {
        let n = 100;
        let dt = 1e-7;
        let w = PiecewiseConstantWaveform::zeros(n, dt).unwrap();
        let delta = mhz_to_rad(0.3);
        let u = propagate(&w, &vec![0.0; n], &vec![delta; n]).unwrap();
        let t = n as f64 * dt;
        let p = u.survival_triple();
        assert!((p[2] - 1.0).abs() < 1e-12);
        assert!((p[0] - (delta * t).cos().powi(2)).abs() < 1e-10);
    }

    #[test]
    fn estimator_algebra() {
        let t = SurvivalTriple { p: [1.0, 1.0, 1.0], p_err: [0.0; 3], n_realizations: 1, estimator: 0.0, estimator_err: 0.0 };
        assert_eq!(tomographic_estimator(&t).0, 0.0);
        let v = 0.013;
        let t2 = SurvivalTriple { p: [1.0, 1.0 - 2.0 * v, 1.0], ..t };
        assert!((tomographic_estimator(&t2).0 - v).abs() < 1e-15);
    }

    #[test]
    fn noiseless_ensemble() {
        let (w, _) = dephasing_robust(20e-6, 5, 2, 2000, AmplitudeRule::DiscreteNull).unwrap();
        let s = survival_probabilities(&w, &SpectrumModel::Zero, &SpectrumModel::Zero, &SimulationOptions::new(4, 1)).unwrap();
        for p in s.p {
            assert!((p - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn first_order_vector_special_cases() {
        let n = 50;
        let w = PiecewiseConstantWaveform::zeros(n, 1e-7).unwrap();
        let delta = 1234.0;
        let a = error_vector_first_order(&w, &vec![0.0; n], &vec![delta; n]).unwrap();
        assert_eq!(a[0], 0.0);
        assert!(a[1].abs() < 1e-15);
        assert!((a[2] - delta * w.total_time()).abs() < 1e-12);
        let z = error_vector_first_order(&w, &vec![0.0; n], &vec![0.0; n]).unwrap();
        assert_eq!(z, [0.0; 3]);
    }

    #[test]
    fn magnus_vanishes_without_control() {
        let w = PiecewiseConstantWaveform::zeros(30, 1e-7).unwrap();
        let b: Vec<f64> = (0..30).map(|i| (i as f64).sin()).collect();
        assert_eq!(magnus_second_order_a1(&w, &b).unwrap(), 0.0);
    }

    proptest! {
        #[test]
        fn magnus_matches_double_loop(
            om in proptest::collection::vec(-4.0f64..4.0, 1..64),
            seed in 0u64..1000,
        ) {
            let n = om.len();
            let w = PiecewiseConstantWaveform::new(om, 0.21).unwrap();
            let b: Vec<f64> = (0..n).map(|i| ((i as u64 * 7919 + seed) % 101) as f64 / 50.0 - 1.0).collect();
            let th = rotation_angle(&w);
            let mut brute = 0.0;
            for j1 in 0..n {
                for j2 in 0..j1 {
                    brute += b[j1] * b[j2] * (th[j1] - th[j2]).sin();
                }
            }
            brute *= w.dt * w.dt;
            let fast = magnus_second_order_a1(&w, &b).unwrap();
            prop_assert!((fast - brute).abs() < 1e-12 * (1.0 + brute.abs()));
        }
    }

    #[test]
    fn static_detuning_second_order_matches_gz() {
        let (w, _) = dephasing_robust(1e-6, 2, 1, 64, AmplitudeRule::BesselRoot).unwrap();
        let mu = 2e5;
        let a = magnus_second_order_a1(&w, &vec![mu; 64]).unwrap();
        let g = higher_order_ff(&w, &[0.0], &[0.0]).unwrap().values[0];
        assert!((a * a - mu.powi(4) / 3.0 * g.re).abs() < 1e-10 * (a * a));
        assert!(g.im.abs() < 1e-12 * g.re.abs());
    }

    #[test]
    fn detuning_only_infidelity_tracks_dephasing_overlap() {
        let (w, _) = dephasing_robust(20e-6, 2, 1, 2000, AmplitudeRule::BesselRoot).unwrap();
        let deph = SpectrumModel::OneOverF { c: 0.3, a_z: 1e8, omega_l: mhz_to_rad(0.01), omega_h: mhz_to_rad(2.0) };
        let opts = SimulationOptions::new(2000, 17);
        let samples = survival_samples(&w, &SpectrumModel::Zero, &deph, &opts).unwrap();
        let one_minus: Vec<f64> = samples.iter().map(|s| 1.0 - s[0]).collect();
        let (m, se) = mean_and_se(&one_minus);
        let iz = dephasing_overlap(&w, &deph);
        assert!((m - iz).abs() < 3.0 * se + 0.02 * iz, "{m} ± {se} vs {iz}");
    }
}
