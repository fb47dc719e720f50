//! Piecewise-constant control waveforms and their generators.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

pub use crate::special::bessel_j0_roots;

use crate::error::{param, Error, Result};
use crate::slepian::{dpss, DpssSet};
use crate::special::bessel_j0_root;
use crate::transform::SegmentSignal;
use crate::TAU;

/// N amplitude samples Ω_m (rad/s), each held for Δt seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseConstantWaveform {
    pub samples: Vec<f64>,
    pub dt: f64,
}

impl PiecewiseConstantWaveform {
    pub fn new(samples: Vec<f64>, dt: f64) -> Result<Self> {
        if samples.is_empty() {
            return param("waveform needs at least one sample");
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return param(format!("segment duration must be positive, got {dt}"));
        }
        if let Some(i) = samples.iter().position(|x| !x.is_finite()) {
            return param(format!("sample {i} is not finite"));
        }
        Ok(Self { samples, dt })
    }

    pub fn zeros(n: usize, dt: f64) -> Result<Self> {
        Self::new(vec![0.0; n], dt)
    }

    pub fn n(&self) -> usize {
        self.samples.len()
    }

    pub fn total_time(&self) -> f64 {
        self.dt * self.samples.len() as f64
    }

    /// Net rotation angle Δt·ΣΩ_m.
    pub fn net_rotation(&self) -> f64 {
        self.dt * self.samples.iter().sum::<f64>()
    }

    pub fn is_identity(&self) -> bool {
        let scale = self.dt * self.samples.iter().map(|x| x.abs()).sum::<f64>();
        self.net_rotation().abs() < 1e-9 * scale.max(1.0)
    }

    pub fn max_abs(&self) -> f64 {
        self.samples.iter().fold(0.0, |a, x| a.max(x.abs()))
    }

    pub fn time_reversed(&self) -> Self {
        Self { samples: self.samples.iter().rev().copied().collect(), dt: self.dt }
    }

    /// ‖a − b‖₂ / ‖b‖₂ on the sample vectors.
    pub fn relative_l2_distance(&self, reference: &Self) -> f64 {
        let num: f64 = self.samples.iter().zip(&reference.samples).map(|(a, b)| (a - b).powi(2)).sum();
        let den: f64 = reference.samples.iter().map(|b| b * b).sum();
        (num / den).sqrt()
    }

    pub fn amplitude_signal(&self) -> SegmentSignal {
        SegmentSignal::piecewise_constant(&self.samples, self.dt)
    }

    /// CSV with `t_start_s, omega_rad_per_s` columns and `#` header comments.
    pub fn write_csv<W: Write>(&self, out: &mut W, comments: &[(String, String)]) -> Result<()> {
        writeln!(out, "# dt_s = {:e}", self.dt)?;
        writeln!(out, "# n = {}", self.n())?;
        for (k, v) in comments {
            writeln!(out, "# {k} = {v}")?;
        }
        writeln!(out, "t_start_s,omega_rad_per_s")?;
        for (m, v) in self.samples.iter().enumerate() {
            writeln!(out, "{:e},{:e}", m as f64 * self.dt, v)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut dt = None;
        let mut samples = Vec::new();
        for line in input.lines() {
            let line = line?;
            let line = line.trim();
            if let Some(rest) = line.strip_prefix('#') {
                if let Some((k, v)) = rest.split_once('=') {
                    if k.trim() == "dt_s" {
                        dt = v.trim().parse::<f64>().ok();
                    }
                }
                continue;
            }
            if line.is_empty() || line.starts_with("t_start_s") {
                continue;
            }
            let val = line
                .split(',')
                .nth(1)
                .and_then(|s| s.trim().parse::<f64>().ok())
                .ok_or_else(|| Error::Parameter(format!("bad waveform row `{line}`")))?;
            samples.push(val);
        }
        let dt = dt.ok_or_else(|| Error::Parameter("missing `# dt_s` header".into()))?;
        Self::new(samples, dt)
    }
}

/// Cosine/sine coefficients of the modulated-DPSS parametrization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveformCoefficients {
    pub omega0: f64,
    pub cos_coeffs: Vec<f64>,
    pub sin_coeffs: Vec<f64>,
}

impl WaveformCoefficients {
    pub fn zeros(k: usize, omega0: f64) -> Self {
        Self { omega0, cos_coeffs: vec![0.0; k], sin_coeffs: vec![0.0; k] }
    }

    pub fn k(&self) -> usize {
        self.cos_coeffs.len()
    }

    /// Variable vector x = [c_0..c_{K-1}, s_0..s_{K-1}].
    pub fn to_vector(&self) -> Vec<f64> {
        self.cos_coeffs.iter().chain(&self.sin_coeffs).copied().collect()
    }

    pub fn from_vector(omega0: f64, x: &[f64]) -> Self {
        let k = x.len() / 2;
        Self { omega0, cos_coeffs: x[..k].to_vec(), sin_coeffs: x[k..].to_vec() }
    }
}

/// Ω_m = Σ_k [c_k cos(ω₀mΔt) + s_k sin(ω₀mΔt)]·v_m^(k).
pub fn synthesize(coeffs: &WaveformCoefficients, set: &DpssSet, dt: f64) -> Result<PiecewiseConstantWaveform> {
    let k = coeffs.k();
    if coeffs.sin_coeffs.len() != k || k == 0 {
        return param("cosine and sine coefficient lists must have equal nonzero length");
    }
    if set.k() < k {
        return Err(Error::LengthMismatch { expected: k, got: set.k() });
    }
    let samples = (0..set.n)
        .map(|m| {
            let ph = coeffs.omega0 * m as f64 * dt;
            let (s, c) = ph.sin_cos();
            (0..k).map(|j| (coeffs.cos_coeffs[j] * c + coeffs.sin_coeffs[j] * s) * set.sequences[j][m]).sum()
        })
        .collect();
    PiecewiseConstantWaveform::new(samples, dt)
}

/// How the dephasing-robust amplitude Ω₀ is fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AmplitudeRule {
    /// Ω₀ = λ·j₀,ₖ exactly.
    BesselRoot,
    /// Start at the Bessel root and refine Ω₀ so that the sampled waveform's
    /// F_Z(0) vanishes to machine precision.
    #[default]
    DiscreteNull,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DephasingRobustParams {
    pub lambda: f64,
    pub omega0: f64,
    pub root_index: usize,
    pub periods: usize,
}

/// Ω_m = Ω₀ sin(λ·mΔt) with λ = 2πM/T and Ω₀ from the chosen root of J₀.
pub fn dephasing_robust(
    total_time: f64,
    periods: usize,
    root_index: usize,
    n: usize,
    rule: AmplitudeRule,
) -> Result<(PiecewiseConstantWaveform, DephasingRobustParams)> {
    if periods == 0 {
        return param("number of periods M must be positive");
    }
    if root_index == 0 {
        return param("root index starts at 1");
    }
    if n == 0 || !(total_time > 0.0) {
        return param("need N >= 1 and T > 0");
    }
    if 2 * periods > n {
        return param(format!("M={periods} periods cannot be sampled by N={n} segments"));
    }
    let dt = total_time / n as f64;
    let lambda = TAU * periods as f64 / total_time;
    let shape: Vec<f64> = (0..n).map(|m| (lambda * m as f64 * dt).sin()).collect();
    let mut omega0 = lambda * bessel_j0_root(root_index);
    if rule == AmplitudeRule::DiscreteNull {
        omega0 = null_dc_dephasing(&shape, dt, omega0);
    }
    let samples = shape.iter().map(|s| omega0 * s).collect();
    let params = DephasingRobustParams { lambda, omega0, root_index, periods };
    Ok((PiecewiseConstantWaveform::new(samples, dt)?, params))
}

/// Newton iteration on the amplitude so that ∫e^{iΘ(t)}dt = 0 for the sampled
/// shape. Near a Bessel root the transform is close to linear in Ω₀ along a
/// fixed complex direction, so the projected update converges quickly.
fn null_dc_dephasing(shape: &[f64], dt: f64, start: f64) -> f64 {
    let e = |amp: f64| {
        let samples: Vec<f64> = shape.iter().map(|s| amp * s).collect();
        SegmentSignal::phase_exponential(&samples, dt, 1.0).at(0.0)
    };
    let mut amp = start;
    let mut best = (e(amp).norm(), amp);
    for _ in 0..30 {
        let h = 1e-6 * amp;
        let f = e(amp);
        let d = (e(amp + h) - e(amp - h)) / (2.0 * h);
        let step = (f * d.conj()).re / d.norm_sqr();
        amp -= step;
        let r = e(amp).norm();
        if r < best.0 {
            best = (r, amp);
        }
        if step.abs() < 1e-15 * amp {
            break;
        }
    }
    best.1
}

/// Root index whose amplitude λ·j₀,ₖ is closest to `target_omega0`.
pub fn root_index_for_amplitude(lambda: f64, target_omega0: f64) -> usize {
    let ratio = target_omega0 / lambda;
    // Roots are spaced by about π, so scan a window around the estimate.
    let guess = ((ratio / std::f64::consts::PI) + 0.25).round().max(1.0) as usize;
    let lo = guess.saturating_sub(3).max(1);
    (lo..=guess + 3)
        .min_by(|&a, &b| {
            let da = (bessel_j0_root(a) - ratio).abs();
            let db = (bessel_j0_root(b) - ratio).abs();
            da.partial_cmp(&db).unwrap()
        })
        .unwrap()
}

/// Ω_m = amp_max·ṽ_m·sin(λmΔt), m = 0..N−1, with ṽ the k=0 DPSS scaled to
/// unit peak.
///
/// The taper is the length-(N+1) sequence on m = 0..N, so ṽ_m = ṽ_{N−m}. Paired
/// with sin(λ(N−m)Δt) = −sin(λmΔt) this makes the net rotation vanish exactly;
/// the dropped endpoint m = N multiplies sin(2πM) = 0.
pub fn modulated_dpss_waveform(n: usize, w: f64, amp_max: f64, lambda: f64, dt: f64) -> Result<PiecewiseConstantWaveform> {
    if n as f64 * w < 1.0 - 1e-12 {
        return param(format!("modulated DPSS waveform needs NW >= 1, got {}", n as f64 * w));
    }
    let set = dpss(n + 1, w, 1)?;
    Ok(modulated_from_set(&set, amp_max, lambda, dt, n))
}

/// Ω_m = amp_max·ṽ_m·sin(λmΔt) for the first `n` entries of the k=0 sequence.
pub fn modulated_from_set(set: &DpssSet, amp_max: f64, lambda: f64, dt: f64, n: usize) -> PiecewiseConstantWaveform {
    let v = &set.sequences[0];
    let peak = v.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    let samples = v[..n]
        .iter()
        .enumerate()
        .map(|(m, x)| amp_max * x / peak * (lambda * m as f64 * dt).sin())
        .collect();
    PiecewiseConstantWaveform { samples, dt }
}

/// Θ_0 = 0, Θ_{i+1} = Θ_i + Δt·Ω_i (N + 1 values).
pub fn rotation_angle(waveform: &PiecewiseConstantWaveform) -> Vec<f64> {
    let mut out = Vec::with_capacity(waveform.n() + 1);
    let mut th = 0.0;
    out.push(th);
    for &om in &waveform.samples {
        th += waveform.dt * om;
        out.push(th);
    }
    out
}
