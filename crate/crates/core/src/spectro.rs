//! Band-integrated overlap matrices and spectrum reconstruction by
//! non-negative least squares.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::noisegen::{psd_eval, SpectrumModel};
use crate::quad::panel_rule;
use crate::waveform::PiecewiseConstantWaveform;
use crate::{rad_to_mhz, TAU};

#[derive(Debug, Clone, Serialize)]
pub struct OverlapMatrix {
    /// Row-major, `rows × bands`.
    pub entries: Vec<f64>,
    pub rows: usize,
    pub bands: usize,
    pub delta_omega: f64,
    pub total_time: f64,
    /// Free-form labels tying rows to waveforms.
    pub row_labels: Vec<String>,
}

impl OverlapMatrix {
    pub fn get(&self, r: usize, l: usize) -> f64 {
        self.entries[r * self.bands + l]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.entries[r * self.bands..(r + 1) * self.bands]
    }

    /// Band centers ℓΔω for ℓ = 1..=L.
    pub fn band_centers(&self) -> Vec<f64> {
        (1..=self.bands).map(|l| l as f64 * self.delta_omega).collect()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows).map(|r| self.row(r).iter().zip(x).map(|(a, b)| a * b).sum()).collect()
    }

    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        write!(out, "row")?;
        for c in self.band_centers() {
            write!(out, ",{:.6}", rad_to_mhz(c))?;
        }
        writeln!(out)?;
        for r in 0..self.rows {
            write!(out, "{}", self.row_labels[r])?;
            for v in self.row(r) {
                write!(out, ",{:e}", v)?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Band edges: [0, 3Δω/2] for ℓ = 1 and [(ℓ−½)Δω, (ℓ+½)Δω] otherwise.
pub fn band_edges(l: usize, delta_omega: f64) -> (f64, f64) {
    if l == 1 {
        (0.0, 1.5 * delta_omega)
    } else {
        ((l as f64 - 0.5) * delta_omega, (l as f64 + 0.5) * delta_omega)
    }
}

pub fn overlap_matrix(waveforms: &[PiecewiseConstantWaveform], bands: usize, delta_omega: f64) -> Result<OverlapMatrix> {
    overlap_matrix_with(waveforms, bands, delta_omega, 32)
}

/// Entries (1/π)∫_band F_Ω dω by Gauss–Legendre with at least
/// `points_per_linewidth` nodes per 2π/T.
pub fn overlap_matrix_with(
    waveforms: &[PiecewiseConstantWaveform],
    bands: usize,
    delta_omega: f64,
    points_per_linewidth: usize,
) -> Result<OverlapMatrix> {
    if waveforms.is_empty() || bands == 0 {
        return Err(Error::Parameter("need at least one waveform and one band".into()));
    }
    if !(delta_omega > 0.0) {
        return Err(Error::Parameter("band width must be positive".into()));
    }
    if points_per_linewidth < 8 {
        return Err(Error::Grid(format!("{points_per_linewidth} points per linewidth is below the minimum of 8")));
    }
    let t = waveforms[0].total_time();
    let dt = waveforms[0].dt;
    for w in waveforms {
        if (w.total_time() - t).abs() > 1e-9 * t {
            return Err(Error::Parameter("waveforms must share the total time".into()));
        }
    }
    let nyquist = std::f64::consts::PI / dt;
    if (bands as f64 + 0.5) * delta_omega > nyquist * (1.0 + 1e-12) {
        return Err(Error::Grid(format!(
            "top band edge {:.4} MHz exceeds the Nyquist frequency {:.4} MHz",
            rad_to_mhz((bands as f64 + 0.5) * delta_omega),
            rad_to_mhz(nyquist)
        )));
    }
    const ORDER: usize = 8;
    let max_panel = TAU / t * ORDER as f64 / points_per_linewidth as f64;
    let rules: Vec<(Vec<f64>, Vec<f64>)> = (1..=bands)
        .map(|l| {
            let (a, b) = band_edges(l, delta_omega);
            panel_rule(a, b, max_panel, ORDER)
        })
        .collect();
    let rows: Vec<Vec<f64>> = waveforms
        .par_iter()
        .map(|w| {
            let sig = w.amplitude_signal();
            rules
                .iter()
                .map(|(xs, ws)| {
                    let vals = sig.at_many(xs);
                    vals.iter().zip(ws).map(|(z, wt)| 0.25 * z.norm_sqr() * wt).sum::<f64>() / std::f64::consts::PI
                })
                .collect()
        })
        .collect();
    Ok(OverlapMatrix {
        entries: rows.concat(),
        rows: waveforms.len(),
        bands,
        delta_omega,
        total_time: t,
        row_labels: (0..waveforms.len()).map(|r| r.to_string()).collect(),
    })
}

/// Householder least squares for the columns `cols` of a row-major m×n matrix.
fn lstsq_columns(a: &[f64], m: usize, n: usize, cols: &[usize], y: &[f64]) -> Vec<f64> {
    let k = cols.len();
    let mut q: Vec<f64> = Vec::with_capacity(m * k);
    for i in 0..m {
        for &c in cols {
            q.push(a[i * n + c]);
        }
    }
    let mut b = y.to_vec();
    let mut diag = vec![0.0; k];
    for j in 0..k.min(m) {
        let norm = (j..m).map(|i| q[i * k + j].powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if q[j * k + j] > 0.0 { -norm } else { norm };
        q[j * k + j] -= alpha;
        let vnorm2 = (j..m).map(|i| q[i * k + j].powi(2)).sum::<f64>();
        if vnorm2 > 0.0 {
            for c in j + 1..k {
                let s = (j..m).map(|i| q[i * k + j] * q[i * k + c]).sum::<f64>() * 2.0 / vnorm2;
                for i in j..m {
                    q[i * k + c] -= s * q[i * k + j];
                }
            }
            let s = (j..m).map(|i| q[i * k + j] * b[i]).sum::<f64>() * 2.0 / vnorm2;
            for i in j..m {
                b[i] -= s * q[i * k + j];
            }
        }
        diag[j] = alpha;
    }
    let scale = diag.iter().fold(0.0f64, |acc, d| acc.max(d.abs()));
    let mut x = vec![0.0; k];
    for j in (0..k.min(m)).rev() {
        if diag[j].abs() <= 1e-14 * scale {
            continue;
        }
        let s: f64 = (j + 1..k).map(|c| q[j * k + c] * x[c]).sum();
        x[j] = (b[j] - s) / diag[j];
    }
    x
}

fn gradient(a: &[f64], m: usize, n: usize, x: &[f64], y: &[f64]) -> Vec<f64> {
    let r: Vec<f64> = (0..m).map(|i| y[i] - (0..n).map(|j| a[i * n + j] * x[j]).sum::<f64>()).collect();
    (0..n).map(|j| (0..m).map(|i| a[i * n + j] * r[i]).sum()).collect()
}

/// Lawson–Hanson active-set solution of min ‖Ax − y‖₂ subject to x ≥ 0.
/// `a` is row-major m×n.
pub fn nnls(a: &[f64], m: usize, n: usize, y: &[f64]) -> Result<Vec<f64>> {
    if a.len() != m * n {
        return Err(Error::LengthMismatch { expected: m * n, got: a.len() });
    }
    if y.len() != m {
        return Err(Error::LengthMismatch { expected: m, got: y.len() });
    }
    let aty = gradient(a, m, n, &vec![0.0; n], y);
    let tol = 1e-10 * aty.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let mut x = vec![0.0; n];
    let mut passive = vec![false; n];
    let max_iter = 30 * n.max(1) + 100;
    let mut iter = 0;
    loop {
        let w = gradient(a, m, n, &x, y);
        let pick = (0..n).filter(|&j| !passive[j] && w[j] > tol).max_by(|&i, &j| w[i].total_cmp(&w[j]));
        let Some(jmax) = pick else { return Ok(x) };
        passive[jmax] = true;
        loop {
            iter += 1;
            if iter > max_iter {
                return Err(Error::NonConvergence { what: "nnls".into(), iterations: iter, best: x });
            }
            let cols: Vec<usize> = (0..n).filter(|&j| passive[j]).collect();
            let z = lstsq_columns(a, m, n, &cols, y);
            if z.iter().all(|&v| v > 0.0) {
                for (c, v) in cols.iter().zip(&z) {
                    x[*c] = *v;
                }
                break;
            }
            let mut alpha = f64::INFINITY;
            for (c, &v) in cols.iter().zip(&z) {
                if v <= 0.0 {
                    alpha = alpha.min(x[*c] / (x[*c] - v));
                }
            }
            for (c, &v) in cols.iter().zip(&z) {
                x[*c] += alpha * (v - x[*c]);
            }
            for &c in &cols {
                if x[c] <= 1e-15 * (1.0 + x.iter().fold(0.0f64, |acc, v| acc.max(*v))) {
                    x[c] = 0.0;
                    passive[c] = false;
                }
            }
            if cols.iter().all(|&c| !passive[c]) {
                break;
            }
        }
    }
}

/// Singular values of a row-major m×n matrix by one-sided Jacobi, descending.
pub fn singular_values(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a[i * n + j]).collect()).collect();
    for _ in 0..60 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha: f64 = cols[p].iter().map(|v| v * v).sum();
                let beta: f64 = cols[q].iter().map(|v| v * v).sum();
                let gamma: f64 = cols[p].iter().zip(&cols[q]).map(|(u, v)| u * v).sum();
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let (u, v) = (cols[p][i], cols[q][i]);
                    cols[p][i] = c * u - s * v;
                    cols[q][i] = s * u + c * v;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = cols.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

#[derive(Debug, Clone, Serialize)]
pub struct ConditionDiagnostics {
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub condition_number: f64,
    /// Smallest ratio of a row's diagonal entry to its row sum.
    pub min_diagonal_fraction: f64,
}

pub fn condition_diagnostics(matrix: &OverlapMatrix) -> ConditionDiagnostics {
    let sv = singular_values(&matrix.entries, matrix.rows, matrix.bands);
    let sigma_max = sv.first().copied().unwrap_or(0.0);
    let sigma_min = if matrix.rows >= matrix.bands { sv.last().copied().unwrap_or(0.0) } else { 0.0 };
    let min_diagonal_fraction = (0..matrix.rows.min(matrix.bands))
        .map(|r| {
            let s: f64 = matrix.row(r).iter().sum();
            if s > 0.0 { matrix.get(r, r) / s } else { 0.0 }
        })
        .fold(f64::INFINITY, f64::min);
    ConditionDiagnostics { sigma_max, sigma_min, condition_number: sigma_max / sigma_min, min_diagonal_fraction }
}

#[derive(Debug, Clone, Serialize)]
pub struct ReconstructionResult {
    pub omegas: Vec<f64>,
    pub estimates: Vec<f64>,
    pub residual_norm: f64,
    pub condition: ConditionDiagnostics,
    pub truth: Option<Vec<f64>>,
    /// (Ŝ − S)/S per band where S > 0.
    pub relative_errors: Option<Vec<f64>>,
}

impl ReconstructionResult {
    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        match &self.truth {
            Some(t) => {
                writeln!(out, "omega_over_2pi_mhz,s_omega_est,s_omega_true")?;
                for ((w, e), s) in self.omegas.iter().zip(&self.estimates).zip(t) {
                    writeln!(out, "{:.6},{:e},{:e}", rad_to_mhz(*w), e, s)?;
                }
            }
            None => {
                writeln!(out, "omega_over_2pi_mhz,s_omega_est")?;
                for (w, e) in self.omegas.iter().zip(&self.estimates) {
                    writeln!(out, "{:.6},{:e}", rad_to_mhz(*w), e)?;
                }
            }
        }
        Ok(())
    }
}

/// True spectrum sampled at the band centers.
pub fn band_truth(model: &SpectrumModel, bands: usize, delta_omega: f64) -> Vec<f64> {
    (1..=bands).map(|l| psd_eval(model, l as f64 * delta_omega)).collect()
}

/// Ŝ = nnls(W·A, W·𝒫) with optional per-row weights W.
pub fn reconstruct(
    measurements: &[f64],
    matrix: &OverlapMatrix,
    weights: Option<&[f64]>,
    truth: Option<&[f64]>,
) -> Result<ReconstructionResult> {
    let (m, n) = (matrix.rows, matrix.bands);
    if measurements.len() != m {
        return Err(Error::LengthMismatch { expected: m, got: measurements.len() });
    }
    let mut a = matrix.entries.clone();
    let mut y = measurements.to_vec();
    if let Some(w) = weights {
        if w.len() != m {
            return Err(Error::LengthMismatch { expected: m, got: w.len() });
        }
        for r in 0..m {
            for v in &mut a[r * n..(r + 1) * n] {
                *v *= w[r];
            }
            y[r] *= w[r];
        }
    }
    let estimates = nnls(&a, m, n, &y)?;
    let fit = matrix.apply(&estimates);
    let residual_norm = fit.iter().zip(measurements).map(|(f, p)| (f - p).powi(2)).sum::<f64>().sqrt();
    if let Some(t) = truth {
        if t.len() != n {
            return Err(Error::LengthMismatch { expected: n, got: t.len() });
        }
    }
    let relative_errors = truth.map(|t| {
        estimates.iter().zip(t).map(|(e, s)| if *s > 0.0 { (e - s) / s } else { f64::NAN }).collect()
    });
    Ok(ReconstructionResult {
        omegas: matrix.band_centers(),
        estimates,
        residual_norm,
        condition: condition_diagnostics(matrix),
        truth: truth.map(|t| t.to_vec()),
        relative_errors,
    })
}

/// Median of the finite values.
pub fn median(v: &[f64]) -> f64 {
    let mut s: Vec<f64> = v.iter().copied().filter(|x| x.is_finite()).collect();
    if s.is_empty() {
        return f64::NAN;
    }
    s.sort_by(|a, b| a.total_cmp(b));
    let k = s.len();
    if k % 2 == 1 { s[k / 2] } else { 0.5 * (s[k / 2 - 1] + s[k / 2]) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mhz_to_rad;
    use crate::waveform::{dephasing_robust, AmplitudeRule};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dr_rows(bands: usize) -> (Vec<PiecewiseConstantWaveform>, f64) {
        let t = 20e-6;
        let dw = TAU / t;
        let ws = (1..=bands)
            .map(|r| dephasing_robust(t, r, 1, 2000, AmplitudeRule::DiscreteNull).unwrap().0)
            .collect();
        (ws, dw)
    }

    #[test]
    fn identity_clipping() {
        let a = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let x = nnls(&a, 3, 3, &[1.0, -1.0, 2.0]).unwrap();
        assert_eq!(x, vec![1.0, 0.0, 2.0]);
    }

    #[test]
    fn negative_correlation_gives_zero() {
        let a = [1.0, 2.0, 0.5, 1.0, 3.0, 0.1];
        let x = nnls(&a, 3, 2, &[-1.0, -2.0, -0.5]).unwrap();
        assert_eq!(x, vec![0.0, 0.0]);
    }

    #[test]
    fn kkt_conditions_on_random_problem() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (m, n) = (12, 7);
        let a: Vec<f64> = (0..m * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = nnls(&a, m, n, &y).unwrap();
        let w = gradient(&a, m, n, &x, &y);
        let scale = gradient(&a, m, n, &vec![0.0; n], &y).iter().fold(0.0f64, |s, v| s.max(v.abs()));
        for j in 0..n {
            assert!(x[j] >= 0.0);
            assert!(w[j] <= 1e-10 * scale);
            if x[j] > 0.0 {
                assert!(w[j].abs() <= 1e-9 * scale);
            }
        }
    }

    proptest! {
        #[test]
        fn recovers_nonnegative_truth(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (m, n) = (10, 6);
            let mut a: Vec<f64> = (0..m * n).map(|_| rng.random_range(0.0..0.2)).collect();
            for j in 0..n {
                a[j * n + j] += 1.0;
            }
            let s: Vec<f64> = (0..n).map(|j| if j % 3 == 0 { 0.0 } else { rng.random_range(0.0..2.0) }).collect();
            let y: Vec<f64> = (0..m).map(|i| (0..n).map(|j| a[i * n + j] * s[j]).sum()).collect();
            let x = nnls(&a, m, n, &y).unwrap();
            for j in 0..n {
                prop_assert!((x[j] - s[j]).abs() < 1e-8);
            }
        }

        #[test]
        fn row_permutation_invariance(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (m, n) = (9, 5);
            let a: Vec<f64> = (0..m * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x = nnls(&a, m, n, &y).unwrap();
            let perm: Vec<usize> = (0..m).rev().collect();
            let ap: Vec<f64> = perm.iter().flat_map(|&i| a[i * n..(i + 1) * n].to_vec()).collect();
            let yp: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
            let xp = nnls(&ap, m, n, &yp).unwrap();
            for j in 0..n {
                prop_assert!((x[j] - xp[j]).abs() < 1e-12 * (1.0 + x[j].abs()));
            }
        }
    }

    #[test]
    fn extra_row_never_lowers_true_fit_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (m, n) = (8, 4);
        let a: Vec<f64> = (0..(m + 1) * n).map(|_| rng.random_range(0.0..1.0)).collect();
        let y: Vec<f64> = (0..=m).map(|_| rng.random_range(0.0..1.0)).collect();
        let res = |rows: usize| {
            let x = nnls(&a[..rows * n], rows, n, &y[..rows]).unwrap();
            (0..rows).map(|i| (y[i] - (0..n).map(|j| a[i * n + j] * x[j]).sum::<f64>()).powi(2)).sum::<f64>()
        };
        assert!(res(m + 1) >= res(m) - 1e-14);
    }

    #[test]
    fn singular_values_of_diagonal() {
        let a = [3.0, 0.0, 0.0, 0.0, -1.0, 0.0];
        let s = singular_values(&a, 2, 3);
        assert!((s[0] - 3.0).abs() < 1e-14 && (s[1] - 1.0).abs() < 1e-14 && s[2].abs() < 1e-14);
    }

    #[test]
    fn matrix_structure_and_parseval() {
        let (ws, dw) = dr_rows(40);
        let m = overlap_matrix(&ws, 40, dw).unwrap();
        for r in 0..40 {
            let row = m.row(r);
            assert!(row.iter().all(|&v| v >= 0.0));
            let sum: f64 = row.iter().sum();
            assert!(row.iter().all(|&v| v <= m.get(r, r)));
            let window: f64 = row[r.saturating_sub(1)..(r + 2).min(40)].iter().sum();
            assert!(window >= 0.9 * sum, "row {r}: {}", window / sum);
            let parseval = ws[r].dt / 4.0 * ws[r].samples.iter().map(|o| o * o).sum::<f64>();
            if r < 30 {
                assert!((sum / parseval - 1.0).abs() < 0.02, "row {r}: {}", sum / parseval);
            }
        }
        let d = condition_diagnostics(&m);
        assert!(d.min_diagonal_fraction > 0.7 && d.condition_number.is_finite() && d.condition_number > 1.0, "{d:?}");
    }

    #[test]
    fn zero_row_and_grid_errors() {
        let z = PiecewiseConstantWaveform::zeros(2000, 1e-8).unwrap();
        let m = overlap_matrix(&[z.clone()], 10, mhz_to_rad(0.05)).unwrap();
        assert!(m.row(0).iter().all(|&v| v == 0.0));
        assert!(matches!(overlap_matrix_with(&[z.clone()], 10, mhz_to_rad(0.05), 4), Err(Error::Grid(_))));
        assert!(matches!(overlap_matrix(&[z], 2000, mhz_to_rad(0.05)), Err(Error::Grid(_))));
    }

    #[test]
    fn noiseless_forward_model_recovery() {
        let (ws, dw) = dr_rows(20);
        let m = overlap_matrix(&ws, 20, dw).unwrap();
        let truth = vec![1.04e-11; 20];
        let p = m.apply(&truth);
        let rec = reconstruct(&p, &m, None, Some(&truth)).unwrap();
        for e in rec.relative_errors.unwrap() {
            assert!(e.abs() < 1e-6);
        }
        let weighted = reconstruct(&p, &m, Some(&vec![2.0; 20]), None).unwrap();
        for (a, b) in weighted.estimates.iter().zip(&truth) {
            assert!((a / b - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0, f64::NAN]), 2.5);
    }
}
