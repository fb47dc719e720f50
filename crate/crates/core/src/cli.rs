//! Command-line driver: configuration, sweep orchestration and artifact
//! output with manifests.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::filterfn::{amplitude_ff, dephasing_ff, dephasing_robust_amplitude_ff, higher_order_ff, FilterFunctionGrid};
use crate::lp_reduce::prune_constraints;
use crate::noisegen::SpectrumModel;
use crate::optimize::{amplitude_constraint_family, dephasing_robust_init, solve_design, DesignConfig, DesignProblem};
use crate::qsim::{amplitude_overlap, dephasing_overlap_with_detuning, survival_probabilities, SimulationOptions};
use crate::slepian::{dpss, DpssSet};
use crate::spectro::{band_edges, band_truth, median, overlap_matrix, reconstruct, ConditionDiagnostics};
use crate::waveform::{
    dephasing_robust, modulated_from_set, root_index_for_amplitude, AmplitudeRule, PiecewiseConstantWaveform,
};
use crate::{mhz_to_rad, rad_to_mhz, TAU};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "FFQNS_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "ffqns", version, about = "Filter-function design and amplitude-noise spectroscopy")]
pub struct Cli {
    /// Output directory (default: $FFQNS_OUT_DIR or ./ffqns-out).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Slepian sequences and their concentrations.
    Dpss(DpssArgs),
    /// Write a control waveform.
    Waveform(WaveformArgs),
    /// Amplitude and dephasing filter functions.
    Ff(FfArgs),
    /// Higher-order dephasing filter G_Z on a frequency grid.
    Gz(GzArgs),
    /// Reduce the amplitude-constraint family.
    Prune(PruneArgs),
    /// Solve the waveform design problem.
    Optimize(OptimizeArgs),
    /// Monte-Carlo survival probabilities for a sweep config.
    Simulate(ConfigArgs),
    /// Reconstruct the amplitude spectrum from simulate output.
    Reconstruct(ReconstructArgs),
    /// Tidy CSVs for the filter, G_Z, bias and reconstruction figures.
    FigureData(ConfigArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct DpssArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 1.0)]
    pub nw: f64,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// Dephasing-robust Ω₀ sin(λt).
    #[value(name = "dr")]
    #[serde(alias = "dr")]
    DephasingRobust,
    /// Sine-modulated k=0 Slepian.
    Dpss,
}

impl Family {
    fn tag(self) -> &'static str {
        match self {
            Family::DephasingRobust => "dr",
            Family::Dpss => "dpss",
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct WaveformArgs {
    #[arg(long = "waveform", value_enum, default_value = "dr")]
    pub family: Family,
    #[arg(long = "lambda-mhz")]
    pub lambda_mhz: f64,
    #[arg(long = "T-us", alias = "t-us")]
    pub t_us: f64,
    #[arg(long, default_value_t = 10000)]
    pub n: usize,
    /// Root of J₀ for the dephasing-robust amplitude.
    #[arg(long, default_value_t = 1)]
    pub root: usize,
    /// Peak amplitude of the Slepian waveform.
    #[arg(long = "amp-mhz", default_value_t = 5.0)]
    pub amp_mhz: f64,
    #[arg(long, default_value_t = 1.0)]
    pub nw: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct FfArgs {
    #[command(flatten)]
    pub waveform: WaveformArgs,
    #[arg(long = "max-mhz", default_value_t = 2.0)]
    pub max_mhz: f64,
    #[arg(long, default_value_t = 2001)]
    pub points: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct GzArgs {
    #[command(flatten)]
    pub waveform: WaveformArgs,
    /// Grid ω_j = j·step·2π/T for j = 0..points.
    #[arg(long, default_value_t = 41)]
    pub points: usize,
    #[arg(long, default_value_t = 1)]
    pub step: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct PruneArgs {
    #[arg(long = "omega0-mhz", default_value_t = 0.1)]
    pub omega0_mhz: f64,
    #[arg(long = "K", alias = "k", default_value_t = 3)]
    pub k: usize,
    #[arg(long = "NW", alias = "nw", default_value_t = 1.0)]
    pub nw: f64,
    #[arg(long, default_value_t = 20000)]
    pub n: usize,
    #[arg(long = "T-us", alias = "t-us", default_value_t = 100.0)]
    pub t_us: f64,
    #[arg(long, default_value_t = 0.1)]
    pub eps: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct OptimizeArgs {
    #[arg(long = "omega0-mhz", default_value_t = 0.1)]
    pub omega0_mhz: f64,
    #[arg(long = "K", alias = "k", default_value_t = 3)]
    pub k: usize,
    #[arg(long = "NW", alias = "nw", default_value_t = 1.0)]
    pub nw: f64,
    #[arg(long = "omega-max-mhz", default_value_t = 5.0)]
    pub omega_max_mhz: f64,
    #[arg(long, default_value_t = 0.1)]
    pub eps: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20000)]
    pub n: usize,
    #[arg(long = "T-us", alias = "t-us", default_value_t = 100.0)]
    pub t_us: f64,
    /// Regularizer δω/2π in kHz.
    #[arg(long = "delta-omega-khz", default_value_t = 1.0)]
    pub delta_omega_khz: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct ConfigArgs {
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// simulate.csv to invert (default: <out>/simulate.csv).
    #[arg(long)]
    pub input: Option<PathBuf>,
}

/// Noise model with frequencies as ω/2π in MHz. PSD levels are per rad/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseConfig {
    Zero,
    FlatCutoff { a_omega: f64, omega_h_mhz: f64 },
    OneOverF { c: f64, a_z: f64, omega_l_mhz: f64, omega_h_mhz: f64 },
}

impl NoiseConfig {
    pub fn model(&self) -> SpectrumModel {
        match *self {
            NoiseConfig::Zero => SpectrumModel::Zero,
            NoiseConfig::FlatCutoff { a_omega, omega_h_mhz } => {
                SpectrumModel::FlatCutoff { a_omega, omega_h: mhz_to_rad(omega_h_mhz) }
            }
            NoiseConfig::OneOverF { c, a_z, omega_l_mhz, omega_h_mhz } => SpectrumModel::OneOverF {
                c,
                a_z,
                omega_l: mhz_to_rad(omega_l_mhz),
                omega_h: mhz_to_rad(omega_h_mhz),
            },
        }
    }
}

fn default_families() -> Vec<Family> {
    vec![Family::DephasingRobust, Family::Dpss]
}
fn default_one() -> f64 {
    1.0
}
fn default_five() -> f64 {
    5.0
}
fn default_zero_noise() -> NoiseConfig {
    NoiseConfig::Zero
}
fn default_detuning() -> Vec<f64> {
    vec![0.0]
}
fn default_realizations() -> usize {
    2000
}
fn default_oversample() -> usize {
    1
}

/// Sweep configuration. Waveform r uses λ = r·Δω.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_families")]
    pub families: Vec<Family>,
    pub t_us: f64,
    pub n: usize,
    pub bands: usize,
    pub delta_omega_mhz: f64,
    /// Rows to simulate (default 1..=bands).
    #[serde(default)]
    pub rows: Option<Vec<usize>>,
    /// Fixed J₀ root; ignored when `dr_amp_mhz` is set.
    #[serde(default)]
    pub dr_root: Option<usize>,
    /// Pick the root whose amplitude is nearest this value.
    #[serde(default)]
    pub dr_amp_mhz: Option<f64>,
    #[serde(default = "default_one")]
    pub dpss_nw: f64,
    #[serde(default = "default_five")]
    pub dpss_amp_mhz: f64,
    #[serde(default = "default_zero_noise")]
    pub amplitude_noise: NoiseConfig,
    #[serde(default = "default_zero_noise")]
    pub dephasing_noise: NoiseConfig,
    /// Static detuning Δ/2π values.
    #[serde(default = "default_detuning")]
    pub detuning_mhz: Vec<f64>,
    #[serde(default = "default_realizations")]
    pub realizations: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub shots: Option<u64>,
    #[serde(default = "default_oversample")]
    pub noise_oversample: usize,
}

fn cfg_err<T>(field: &str, msg: impl Into<String>) -> Result<T> {
    Err(Error::Config { field: field.into(), msg: msg.into() })
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::Config { field: "config".into(), msg: format!("{}: {e}", path.display()) })?;
        let cfg: RunConfig = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::Config { field: "config".into(), msg: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn total_time(&self) -> f64 {
        self.t_us * 1e-6
    }

    pub fn dt(&self) -> f64 {
        self.total_time() / self.n as f64
    }

    pub fn delta_omega(&self) -> f64 {
        mhz_to_rad(self.delta_omega_mhz)
    }

    pub fn row_list(&self) -> Vec<usize> {
        self.rows.clone().unwrap_or_else(|| (1..=self.bands).collect())
    }

    /// Whole periods of λ = r·Δω over T.
    pub fn periods(&self, r: usize) -> f64 {
        r as f64 * self.delta_omega() * self.total_time() / TAU
    }

    pub fn validate(&self) -> Result<()> {
        if self.families.is_empty() {
            return cfg_err("families", "at least one waveform family is required");
        }
        if !(self.t_us > 0.0 && self.t_us.is_finite()) {
            return cfg_err("t_us", "must be positive");
        }
        if self.n < 2 {
            return cfg_err("n", "must be at least 2");
        }
        if self.bands == 0 {
            return cfg_err("bands", "must be positive");
        }
        if !(self.delta_omega_mhz > 0.0 && self.delta_omega_mhz.is_finite()) {
            return cfg_err("delta_omega_mhz", "must be positive");
        }
        let nyquist = std::f64::consts::PI / self.dt();
        if (self.bands as f64 + 0.5) * self.delta_omega() > nyquist {
            return cfg_err("bands", format!("top band exceeds the Nyquist frequency {:.4} MHz", rad_to_mhz(nyquist)));
        }
        let rows = self.row_list();
        if rows.is_empty() {
            return cfg_err("rows", "must not be empty");
        }
        for &r in &rows {
            if r == 0 || r > self.bands {
                return cfg_err("rows", format!("row {r} outside 1..={}", self.bands));
            }
            let m = self.periods(r);
            if (m - m.round()).abs() > 1e-6 {
                return cfg_err(
                    "delta_omega_mhz",
                    format!("λ = {r}·Δω gives {m} periods over T; dephasing-robust waveforms need a whole number"),
                );
            }
        }
        if let Some(root) = self.dr_root {
            if root == 0 {
                return cfg_err("dr_root", "roots are numbered from 1");
            }
        }
        if let Some(a) = self.dr_amp_mhz {
            if !(a > 0.0) {
                return cfg_err("dr_amp_mhz", "must be positive");
            }
        }
        if !(self.dpss_nw >= 1.0 && self.dpss_nw < self.n as f64 / 2.0) {
            return cfg_err("dpss_nw", "must lie in [1, N/2)");
        }
        if !(self.dpss_amp_mhz > 0.0) {
            return cfg_err("dpss_amp_mhz", "must be positive");
        }
        self.amplitude_noise.model().validate().map_err(|e| Error::Config { field: "amplitude_noise".into(), msg: e.to_string() })?;
        self.dephasing_noise.model().validate().map_err(|e| Error::Config { field: "dephasing_noise".into(), msg: e.to_string() })?;
        if self.detuning_mhz.is_empty() || self.detuning_mhz.iter().any(|d| !d.is_finite()) {
            return cfg_err("detuning_mhz", "needs at least one finite value");
        }
        if self.realizations == 0 {
            return cfg_err("realizations", "must be positive");
        }
        if self.shots == Some(0) {
            return cfg_err("shots", "must be positive when given");
        }
        if self.noise_oversample == 0 {
            return cfg_err("noise_oversample", "must be positive");
        }
        Ok(())
    }
}

/// Builds the waveform for row r of each family, sharing the Slepian taper.
pub struct WaveformFactory<'a> {
    cfg: &'a RunConfig,
    taper: Option<DpssSet>,
}

impl<'a> WaveformFactory<'a> {
    pub fn new(cfg: &'a RunConfig) -> Result<Self> {
        let taper = if cfg.families.contains(&Family::Dpss) {
            Some(dpss(cfg.n + 1, cfg.dpss_nw / cfg.n as f64, 1)?)
        } else {
            None
        };
        Ok(Self { cfg, taper })
    }

    pub fn build(&self, family: Family, r: usize) -> Result<PiecewiseConstantWaveform> {
        let cfg = self.cfg;
        let lambda = r as f64 * cfg.delta_omega();
        match family {
            Family::DephasingRobust => {
                let root = match cfg.dr_amp_mhz {
                    Some(a) => root_index_for_amplitude(lambda, mhz_to_rad(a)),
                    None => cfg.dr_root.unwrap_or(1),
                };
                let m = cfg.periods(r).round() as usize;
                Ok(dephasing_robust(cfg.total_time(), m, root, cfg.n, AmplitudeRule::DiscreteNull)?.0)
            }
            Family::Dpss => {
                let set = self.taper.as_ref().ok_or_else(|| Error::Parameter("Slepian taper not prepared".into()))?;
                Ok(modulated_from_set(set, mhz_to_rad(cfg.dpss_amp_mhz), lambda, cfg.dt(), cfg.n))
            }
        }
    }
}

/// One simulated sweep point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimRow {
    pub family: Family,
    pub row: usize,
    pub detuning_mhz: f64,
    pub p: [f64; 3],
    pub p_err: [f64; 3],
    pub estimator: f64,
    pub estimator_err: f64,
    pub i_omega: f64,
    pub i_z: f64,
}

/// Seed for row r; detuning points share it so they see identical noise.
fn row_seed(seed: u64, r: usize) -> u64 {
    seed.wrapping_add((r as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

pub fn simulate_sweep(cfg: &RunConfig) -> Result<Vec<SimRow>> {
    cfg.validate()?;
    let factory = WaveformFactory::new(cfg)?;
    let amp = cfg.amplitude_noise.model();
    let deph = cfg.dephasing_noise.model();
    let mut out = Vec::new();
    for &family in &cfg.families {
        for r in cfg.row_list() {
            let w = factory.build(family, r)?;
            let i_omega = amplitude_overlap(&w, &amp);
            for &d in &cfg.detuning_mhz {
                let opts = SimulationOptions {
                    n_realizations: cfg.realizations,
                    seed: row_seed(cfg.seed, r),
                    noise_oversample: cfg.noise_oversample,
                    shots: cfg.shots,
                    detuning: mhz_to_rad(d),
                };
                let s = survival_probabilities(&w, &amp, &deph, &opts)?;
                out.push(SimRow {
                    family,
                    row: r,
                    detuning_mhz: d,
                    p: s.p,
                    p_err: s.p_err,
                    estimator: s.estimator,
                    estimator_err: s.estimator_err,
                    i_omega,
                    i_z: dephasing_overlap_with_detuning(&w, &deph, opts.detuning),
                });
            }
        }
    }
    Ok(out)
}

const SIM_HEADER: &str =
    "family,row,lambda_over_2pi_mhz,detuning_over_2pi_mhz,p1,p2,p3,p1_err,p2_err,p3_err,estimator,estimator_err,i_omega,i_z";

pub fn write_sim_csv<W: Write>(cfg: &RunConfig, rows: &[SimRow], out: &mut W) -> Result<()> {
    writeln!(out, "{SIM_HEADER}")?;
    for s in rows {
        writeln!(
            out,
            "{},{},{:.6},{},{:.17e},{:.17e},{:.17e},{:e},{:e},{:e},{:.17e},{:e},{:e},{:e}",
            s.family.tag(),
            s.row,
            s.row as f64 * cfg.delta_omega_mhz,
            s.detuning_mhz,
            s.p[0],
            s.p[1],
            s.p[2],
            s.p_err[0],
            s.p_err[1],
            s.p_err[2],
            s.estimator,
            s.estimator_err,
            s.i_omega,
            s.i_z
        )?;
    }
    Ok(())
}

pub fn read_sim_csv(path: &Path) -> Result<Vec<SimRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(SIM_HEADER) {
        return cfg_err("input", format!("{} is not a simulate.csv file", path.display()));
    }
    let bad = |msg: &str| Error::Config { field: "input".into(), msg: msg.into() };
    let mut out = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 14 {
            return Err(bad("wrong column count"));
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad(&format!("bad number `{}`", f[i])));
        let family = match f[0] {
            "dr" => Family::DephasingRobust,
            "dpss" => Family::Dpss,
            other => return Err(bad(&format!("unknown family `{other}`"))),
        };
        out.push(SimRow {
            family,
            row: f[1].parse().map_err(|_| bad("bad row index"))?,
            detuning_mhz: num(3)?,
            p: [num(4)?, num(5)?, num(6)?],
            p_err: [num(7)?, num(8)?, num(9)?],
            estimator: num(10)?,
            estimator_err: num(11)?,
            i_omega: num(12)?,
            i_z: num(13)?,
        });
    }
    Ok(out)
}

/// Reconstruction for one (family, detuning) slice.
#[derive(Debug, Clone, Serialize)]
pub struct ReconSlice {
    pub family: Family,
    pub detuning_mhz: f64,
    pub omegas_mhz: Vec<f64>,
    pub estimates: Vec<f64>,
    pub truth: Vec<f64>,
    pub relative_errors: Vec<f64>,
    pub residual_norm: f64,
    pub condition: ConditionDiagnostics,
    /// Median |relative error| over bands lying wholly below the amplitude cutoff.
    pub median_abs_rel_error_in_band: f64,
    /// Mean signed relative error over the same bands.
    pub mean_rel_error_in_band: f64,
}

/// Bands ℓ whose upper edge is at or below the amplitude-noise cutoff.
pub fn in_band_mask(cfg: &RunConfig) -> Vec<bool> {
    let cut = cfg.amplitude_noise.model().cutoff();
    (1..=cfg.bands).map(|l| band_edges(l, cfg.delta_omega()).1 <= cut * (1.0 + 1e-12)).collect()
}

pub fn reconstruct_sweep(cfg: &RunConfig, sims: &[SimRow]) -> Result<Vec<ReconSlice>> {
    cfg.validate()?;
    let factory = WaveformFactory::new(cfg)?;
    let truth = band_truth(&cfg.amplitude_noise.model(), cfg.bands, cfg.delta_omega());
    let mask = in_band_mask(cfg);
    let mut out = Vec::new();
    for &family in &cfg.families {
        let rows = cfg.row_list();
        let waveforms: Vec<PiecewiseConstantWaveform> = rows.iter().map(|&r| factory.build(family, r)).collect::<Result<_>>()?;
        let matrix = overlap_matrix(&waveforms, cfg.bands, cfg.delta_omega())?;
        for &d in &cfg.detuning_mhz {
            let y: Vec<f64> = rows
                .iter()
                .map(|&r| {
                    sims.iter()
                        .find(|s| s.family == family && s.row == r && s.detuning_mhz == d)
                        .map(|s| s.estimator)
                        .ok_or_else(|| Error::Config {
                            field: "input".into(),
                            msg: format!("missing {} row {r} at detuning {d} MHz", family.tag()),
                        })
                })
                .collect::<Result<_>>()?;
            let rec = reconstruct(&y, &matrix, None, Some(&truth))?;
            let rel = rec.relative_errors.clone().unwrap_or_default();
            let inb: Vec<f64> = rel.iter().zip(&mask).filter(|(_, m)| **m).map(|(e, _)| *e).collect();
            let abs: Vec<f64> = inb.iter().map(|e| e.abs()).collect();
            let mean = if inb.is_empty() { f64::NAN } else { inb.iter().sum::<f64>() / inb.len() as f64 };
            out.push(ReconSlice {
                family,
                detuning_mhz: d,
                omegas_mhz: rec.omegas.iter().map(|w| rad_to_mhz(*w)).collect(),
                estimates: rec.estimates,
                truth: truth.clone(),
                relative_errors: rel,
                residual_norm: rec.residual_norm,
                condition: rec.condition,
                median_abs_rel_error_in_band: median(&abs),
                mean_rel_error_in_band: mean,
            });
        }
    }
    Ok(out)
}

fn write_recon_csv<W: Write>(slices: &[ReconSlice], out: &mut W) -> Result<()> {
    writeln!(out, "family,detuning_over_2pi_mhz,omega_over_2pi_mhz,s_omega_est,s_omega_true")?;
    for s in slices {
        for i in 0..s.estimates.len() {
            writeln!(out, "{},{},{:.6},{:e},{:e}", s.family.tag(), s.detuning_mhz, s.omegas_mhz[i], s.estimates[i], s.truth[i])?;
        }
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub name: String,
    pub sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub artifacts: Vec<ArtifactEntry>,
    pub complete: bool,
}

/// Collects artifacts in one directory and records them in manifest.json,
/// which is marked complete only after every artifact is written.
pub struct ArtifactWriter {
    dir: PathBuf,
    manifest: Manifest,
}

impl ArtifactWriter {
    pub fn start<C: Serialize>(dir: &Path, command: &str, config: &C, seed: Option<u64>) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let canonical = serde_json::to_string(config)?;
        let manifest = Manifest {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_hash: hex::encode(Sha256::digest(canonical.as_bytes())),
            seed,
            artifacts: Vec::new(),
            complete: false,
        };
        let w = Self { dir: dir.to_path_buf(), manifest };
        w.flush_manifest()?;
        Ok(w)
    }

    fn flush_manifest(&self) -> Result<()> {
        let mut f = BufWriter::new(File::create(self.dir.join("manifest.json"))?);
        serde_json::to_writer_pretty(&mut f, &self.manifest)?;
        writeln!(f)?;
        Ok(())
    }

    pub fn write<F: FnOnce(&mut Vec<u8>) -> Result<()>>(&mut self, name: &str, body: F) -> Result<()> {
        let mut buf = Vec::new();
        body(&mut buf)?;
        std::fs::write(self.dir.join(name), &buf)?;
        self.manifest.artifacts.push(ArtifactEntry { name: name.into(), sha256: hex::encode(Sha256::digest(&buf)) });
        self.flush_manifest()
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        self.write(name, |b| {
            serde_json::to_writer_pretty(&mut *b, value)?;
            b.push(b'\n');
            Ok(())
        })
    }

    pub fn finish(mut self) -> Result<()> {
        self.manifest.complete = true;
        self.flush_manifest()
    }
}

fn out_dir(cli_out: &Option<PathBuf>) -> PathBuf {
    cli_out
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("ffqns-out"))
}

/// Exit status for an error: 2 for configuration and parameter problems,
/// 3 for numerical non-convergence, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } | Error::Parameter(_) | Error::Grid(_) | Error::LengthMismatch { .. } | Error::Json(_) => 2,
        Error::NonConvergence { .. } => 3,
        Error::Io(_) => 1,
    }
}

fn validate_waveform_args(a: &WaveformArgs) -> Result<()> {
    if !(a.t_us > 0.0) {
        return cfg_err("T-us", "must be positive");
    }
    if a.n < 2 {
        return cfg_err("n", "must be at least 2");
    }
    if !(a.lambda_mhz > 0.0) {
        return cfg_err("lambda-mhz", "must be positive");
    }
    let m = a.lambda_mhz * a.t_us;
    if a.family == Family::DephasingRobust && (m - m.round()).abs() > 1e-6 {
        return cfg_err("lambda-mhz", format!("λT/2π = {m} must be a whole number of periods"));
    }
    if a.root == 0 {
        return cfg_err("root", "roots are numbered from 1");
    }
    if !(a.amp_mhz > 0.0) {
        return cfg_err("amp-mhz", "must be positive");
    }
    if !(a.nw >= 1.0 && a.nw < a.n as f64 / 2.0) {
        return cfg_err("nw", "must lie in [1, N/2)");
    }
    Ok(())
}

fn build_single_waveform(a: &WaveformArgs) -> Result<PiecewiseConstantWaveform> {
    validate_waveform_args(a)?;
    let t = a.t_us * 1e-6;
    let lambda = mhz_to_rad(a.lambda_mhz);
    match a.family {
        Family::DephasingRobust => {
            let m = (a.lambda_mhz * a.t_us).round() as usize;
            Ok(dephasing_robust(t, m, a.root, a.n, AmplitudeRule::DiscreteNull)?.0)
        }
        Family::Dpss => {
            let set = dpss(a.n + 1, a.nw / a.n as f64, 1)?;
            Ok(modulated_from_set(&set, mhz_to_rad(a.amp_mhz), lambda, t / a.n as f64, a.n))
        }
    }
}

fn linspace(hi: f64, points: usize) -> Vec<f64> {
    if points < 2 {
        return vec![0.0; points];
    }
    (0..points).map(|i| hi * i as f64 / (points - 1) as f64).collect()
}

fn write_ff_mhz<W: Write>(grid: &FilterFunctionGrid, out: &mut W) -> Result<()> {
    writeln!(out, "omega_over_2pi_mhz,value")?;
    for (w, v) in grid.omegas.iter().zip(&grid.values) {
        writeln!(out, "{:.9},{:e}", rad_to_mhz(*w), v)?;
    }
    Ok(())
}

fn write_waveform<W: Write>(w: &PiecewiseConstantWaveform, out: &mut W) -> Result<()> {
    w.write_csv(out, &[])
}

fn ff_artifacts(art: &mut ArtifactWriter, prefix: &str, a: &WaveformArgs, max_mhz: f64, points: usize) -> Result<()> {
    let w = build_single_waveform(a)?;
    let omegas: Vec<f64> = linspace(mhz_to_rad(max_mhz), points);
    art.write(&format!("{prefix}waveform.csv"), |b| write_waveform(&w, b))?;
    art.write(&format!("{prefix}ff_amplitude.csv"), |b| write_ff_mhz(&amplitude_ff(&w, &omegas), b))?;
    art.write(&format!("{prefix}ff_dephasing.csv"), |b| write_ff_mhz(&dephasing_ff(&w, &omegas), b))?;
    if a.family == Family::DephasingRobust {
        let (_, p) = dephasing_robust(a.t_us * 1e-6, (a.lambda_mhz * a.t_us).round() as usize, a.root, a.n, AmplitudeRule::BesselRoot)?;
        let values = omegas.iter().map(|&x| dephasing_robust_amplitude_ff(p.omega0, p.lambda, w.total_time(), x)).collect();
        let grid = FilterFunctionGrid { omegas: omegas.clone(), values, total_time: w.total_time() };
        art.write(&format!("{prefix}ff_amplitude_closed_form.csv"), |b| write_ff_mhz(&grid, b))?;
    }
    Ok(())
}

fn gz_artifact(art: &mut ArtifactWriter, name: &str, a: &WaveformArgs, points: usize, step: usize) -> Result<()> {
    let w = build_single_waveform(a)?;
    if points == 0 || step == 0 {
        return cfg_err("points", "points and step must be positive");
    }
    let line = TAU / w.total_time();
    let omegas: Vec<f64> = (0..points).map(|j| (j * step) as f64 * line).collect();
    let g = higher_order_ff(&w, &omegas, &omegas)?;
    art.write(name, |b| {
        writeln!(b, "omega_over_2pi_mhz,omega_prime_over_2pi_mhz,re,im,abs")?;
        for (i, x) in omegas.iter().enumerate() {
            for (j, y) in omegas.iter().enumerate() {
                let v = g.get(i, j);
                writeln!(b, "{:.9},{:.9},{:e},{:e},{:e}", rad_to_mhz(*x), rad_to_mhz(*y), v.re, v.im, v.norm())?;
            }
        }
        Ok(())
    })
}

#[derive(Serialize)]
struct ReconSummary<'a> {
    family: &'a str,
    detuning_over_2pi_mhz: f64,
    residual_norm: f64,
    median_abs_rel_error_in_band: f64,
    mean_rel_error_in_band: f64,
    condition: &'a ConditionDiagnostics,
}

fn recon_summary(slices: &[ReconSlice]) -> Vec<ReconSummary<'_>> {
    slices
        .iter()
        .map(|s| ReconSummary {
            family: s.family.tag(),
            detuning_over_2pi_mhz: s.detuning_mhz,
            residual_norm: s.residual_norm,
            median_abs_rel_error_in_band: s.median_abs_rel_error_in_band,
            mean_rel_error_in_band: s.mean_rel_error_in_band,
            condition: &s.condition,
        })
        .collect()
}

pub fn run(cli: &Cli) -> Result<()> {
    let dir = out_dir(&cli.out);
    match &cli.command {
        Command::Dpss(a) => {
            if !(a.nw > 0.0) || a.n == 0 {
                return cfg_err("nw", "N and NW must be positive");
            }
            let set = dpss(a.n, a.nw / a.n as f64, a.k).map_err(|e| Error::Config { field: "dpss".into(), msg: e.to_string() })?;
            let mut art = ArtifactWriter::start(&dir, "dpss", a, None)?;
            art.write("dpss.csv", |b| {
                write!(b, "n")?;
                for k in 0..set.k() {
                    write!(b, ",v{k}")?;
                }
                writeln!(b)?;
                for i in 0..set.n {
                    write!(b, "{i}")?;
                    for k in 0..set.k() {
                        write!(b, ",{:.17e}", set.sequences[k][i])?;
                    }
                    writeln!(b)?;
                }
                Ok(())
            })?;
            art.write_json("eigenvalues.json", &set.eigenvalues)?;
            art.finish()
        }
        Command::Waveform(a) => {
            let w = build_single_waveform(a)?;
            let mut art = ArtifactWriter::start(&dir, "waveform", a, None)?;
            art.write("waveform.csv", |b| write_waveform(&w, b))?;
            art.finish()
        }
        Command::Ff(a) => {
            validate_waveform_args(&a.waveform)?;
            if !(a.max_mhz > 0.0) || a.points < 2 {
                return cfg_err("max-mhz", "need a positive maximum and at least 2 points");
            }
            let mut art = ArtifactWriter::start(&dir, "ff", a, None)?;
            ff_artifacts(&mut art, "", &a.waveform, a.max_mhz, a.points)?;
            art.finish()
        }
        Command::Gz(a) => {
            validate_waveform_args(&a.waveform)?;
            let mut art = ArtifactWriter::start(&dir, "gz", a, None)?;
            gz_artifact(&mut art, "gz.csv", &a.waveform, a.points, a.step)?;
            art.finish()
        }
        Command::Prune(a) => {
            if a.k == 0 || a.n < 2 * a.k || !(a.t_us > 0.0) || !(a.eps > 0.0) {
                return cfg_err("prune", "need K >= 1, N >= 2K, T > 0 and eps > 0");
            }
            let set = dpss(a.n, a.nw / a.n as f64, a.k).map_err(|e| Error::Config { field: "NW".into(), msg: e.to_string() })?;
            let dt = a.t_us * 1e-6 / a.n as f64;
            let full = amplitude_constraint_family(&set, mhz_to_rad(a.omega0_mhz), dt)?;
            let reduced = prune_constraints(&full, a.eps, a.seed)?;
            let mut art = ArtifactWriter::start(&dir, "prune", a, Some(a.seed))?;
            art.write("constraints.csv", |b| reduced.write_csv(b))?;
            art.write_json("prune_summary.json", &serde_json::json!({ "input_rows": full.len(), "retained_rows": reduced.len() }))?;
            art.finish()
        }
        Command::Optimize(a) => {
            if !(a.t_us > 0.0 && a.omega_max_mhz > 0.0 && a.delta_omega_khz > 0.0 && a.eps > 0.0) {
                return cfg_err("optimize", "T, omega-max, delta-omega and eps must be positive");
            }
            if a.k == 0 || a.n < 2 * a.k {
                return cfg_err("K", "need K >= 1 and N >= 2K");
            }
            let cfg = DesignConfig {
                omega0: mhz_to_rad(a.omega0_mhz),
                k: a.k,
                nw: a.nw,
                n: a.n,
                dt: a.t_us * 1e-6 / a.n as f64,
                omega_max: mhz_to_rad(a.omega_max_mhz),
                eps: a.eps,
                seed: a.seed,
                delta_omega: TAU * a.delta_omega_khz * 1e3,
                oversample: 4,
            };
            let mut art = ArtifactWriter::start(&dir, "optimize", a, Some(a.seed))?;
            let problem = DesignProblem::build(&cfg)?;
            let init = dephasing_robust_init(&problem)?;
            let sol = solve_design(&problem, init.as_ref(), a.seed)?;
            art.write_json("coefficients.json", &sol)?;
            art.write("waveform.csv", |b| write_waveform(&sol.waveform, b))?;
            art.finish()
        }
        Command::Simulate(a) => {
            let cfg = RunConfig::from_path(&a.config)?;
            let mut art = ArtifactWriter::start(&dir, "simulate", &cfg, Some(cfg.seed))?;
            let rows = simulate_sweep(&cfg)?;
            art.write("simulate.csv", |b| write_sim_csv(&cfg, &rows, b))?;
            art.finish()
        }
        Command::Reconstruct(a) => {
            let cfg = RunConfig::from_path(&a.config)?;
            let input = a.input.clone().unwrap_or_else(|| dir.join("simulate.csv"));
            let sims = read_sim_csv(&input)?;
            let mut art = ArtifactWriter::start(&dir, "reconstruct", &cfg, Some(cfg.seed))?;
            let slices = reconstruct_sweep(&cfg, &sims)?;
            art.write("reconstruct.csv", |b| write_recon_csv(&slices, b))?;
            art.write_json("reconstruct_summary.json", &recon_summary(&slices))?;
            art.finish()
        }
        Command::FigureData(a) => {
            let cfg = RunConfig::from_path(&a.config)?;
            let mut art = ArtifactWriter::start(&dir, "figure-data", &cfg, Some(cfg.seed))?;
            let lambda_mhz = cfg.delta_omega_mhz * cfg.row_list()[0] as f64;
            let max_mhz = (4.0 * lambda_mhz).max(cfg.delta_omega_mhz * cfg.bands as f64);
            for root in 1..=3 {
                let wa = WaveformArgs {
                    family: Family::DephasingRobust,
                    lambda_mhz,
                    t_us: cfg.t_us,
                    n: cfg.n,
                    root,
                    amp_mhz: cfg.dpss_amp_mhz,
                    nw: cfg.dpss_nw,
                };
                ff_artifacts(&mut art, &format!("ff_dr_root{root}_"), &wa, max_mhz, 2001)?;
                if root == 1 {
                    gz_artifact(&mut art, "gz_dr_root1.csv", &wa, 41, 1)?;
                }
            }
            let wa = WaveformArgs {
                family: Family::Dpss,
                lambda_mhz,
                t_us: cfg.t_us,
                n: cfg.n,
                root: 1,
                amp_mhz: cfg.dpss_amp_mhz,
                nw: cfg.dpss_nw,
            };
            ff_artifacts(&mut art, "ff_dpss_", &wa, max_mhz, 2001)?;
            gz_artifact(&mut art, "gz_dpss.csv", &wa, 41, 1)?;
            let rows = simulate_sweep(&cfg)?;
            art.write("simulate.csv", |b| write_sim_csv(&cfg, &rows, b))?;
            art.write("bias.csv", |b| {
                writeln!(b, "family,lambda_over_2pi_mhz,detuning_over_2pi_mhz,estimator,estimator_err,i_omega,difference")?;
                for s in &rows {
                    writeln!(
                        b,
                        "{},{:.6},{},{:e},{:e},{:e},{:e}",
                        s.family.tag(),
                        s.row as f64 * cfg.delta_omega_mhz,
                        s.detuning_mhz,
                        s.estimator,
                        s.estimator_err,
                        s.i_omega,
                        s.estimator - s.i_omega
                    )?;
                }
                Ok(())
            })?;
            let slices = reconstruct_sweep(&cfg, &rows)?;
            art.write("reconstruct.csv", |b| write_recon_csv(&slices, b))?;
            art.write_json("reconstruct_summary.json", &recon_summary(&slices))?;
            art.finish()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk_config() -> RunConfig {
        serde_json::from_str(
            r#"{
                "t_us": 2.0, "n": 200, "bands": 4, "delta_omega_mhz": 0.5,
                "amplitude_noise": {"kind": "flat_cutoff", "a_omega": 1e-9, "omega_h_mhz": 2.0},
                "detuning_mhz": [0.0, 0.1], "realizations": 20, "seed": 3
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn config_validation_reports_fields() {
        let mut c = desk_config();
        assert!(c.validate().is_ok());
        c.delta_omega_mhz = 0.3;
        match c.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "delta_omega_mhz"),
            other => panic!("{other:?}"),
        }
        let bad: std::result::Result<RunConfig, _> =
            serde_json::from_str(r#"{"t_us": 2.0, "n": 200, "bands": 4, "delta_omega_mhz": 0.5, "lambda": 3}"#);
        assert!(bad.unwrap_err().to_string().contains("lambda"));
    }

    #[test]
    fn zero_noise_simulation_survives() {
        let mut c = desk_config();
        c.amplitude_noise = NoiseConfig::Zero;
        c.detuning_mhz = vec![0.0];
        for row in simulate_sweep(&c).unwrap() {
            for p in row.p {
                assert!((p - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn simulate_csv_round_trip() {
        let c = desk_config();
        let rows = simulate_sweep(&c).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("simulate.csv");
        let mut buf = Vec::new();
        write_sim_csv(&c, &rows, &mut buf).unwrap();
        std::fs::write(&path, &buf).unwrap();
        let back = read_sim_csv(&path).unwrap();
        assert_eq!(back.len(), rows.len());
        for (a, b) in back.iter().zip(&rows) {
            assert_eq!(a.estimator, b.estimator);
            assert_eq!(a.p, b.p);
        }
        let slices = reconstruct_sweep(&c, &back).unwrap();
        assert_eq!(slices.len(), 4);
        assert!(slices.iter().all(|s| s.estimates.iter().all(|&x| x >= 0.0)));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config { field: "x".into(), msg: String::new() }), 2);
        assert_eq!(exit_code(&Error::NonConvergence { what: String::new(), iterations: 0, best: vec![] }), 3);
    }
}
