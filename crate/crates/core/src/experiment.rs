//! Synthetic recovery experiments and their manifests.
//!
//! Every recipe is a pure function of its [`ExperimentConfig`]: the same
//! config reproduces the same output bytes, which [`verify_rerun`] checks.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::estimator::{fit, predict_series, EstimatorConfig, RunManifest};
use crate::grid::{DomainMask, Grid3, ScalarField, VectorField};
use crate::io::{self, Cell, NoiseScale};
use crate::metrics::mae_maxnorm;
use crate::series::VolumeSeries;
use crate::solver::{integrate, BoundaryData, SolverConfig, TransportMode};
use crate::synthetic::{ground_truth, GroundTruth, TruthConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Recipe {
    AdvViaAdv,
    DiffViaDiff,
    AdvViaAdvdiff,
    DiffViaAdvdiff,
    NoiseLadder,
}

impl Recipe {
    pub const ALL: [Recipe; 5] = [
        Recipe::AdvViaAdv,
        Recipe::DiffViaDiff,
        Recipe::AdvViaAdvdiff,
        Recipe::DiffViaAdvdiff,
        Recipe::NoiseLadder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Recipe::AdvViaAdv => "adv-via-adv",
            Recipe::DiffViaDiff => "diff-via-diff",
            Recipe::AdvViaAdvdiff => "adv-via-advdiff",
            Recipe::DiffViaAdvdiff => "diff-via-advdiff",
            Recipe::NoiseLadder => "noise-ladder",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown recipe {s:?}")))
    }

    /// Simulated process and fitted model of each run.
    pub fn runs(self) -> Vec<(Physics, TransportMode)> {
        match self {
            Recipe::AdvViaAdv => vec![(Physics::Advection, TransportMode::AdvectionOnly)],
            Recipe::DiffViaDiff => vec![(Physics::Diffusion, TransportMode::DiffusionOnly)],
            Recipe::AdvViaAdvdiff => vec![(Physics::Advection, TransportMode::AdvectionDiffusion)],
            Recipe::DiffViaAdvdiff => vec![(Physics::Diffusion, TransportMode::AdvectionDiffusion)],
            Recipe::NoiseLadder => vec![
                (Physics::Advection, TransportMode::AdvectionOnly),
                (Physics::Diffusion, TransportMode::DiffusionOnly),
            ],
        }
    }
}

/// Process used to simulate the measured series.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Physics {
    Advection,
    Diffusion,
}

impl Physics {
    pub fn name(self) -> &'static str {
        match self {
            Physics::Advection => "adv",
            Physics::Diffusion => "diff",
        }
    }

    fn mode(self) -> TransportMode {
        match self {
            Physics::Advection => TransportMode::AdvectionOnly,
            Physics::Diffusion => TransportMode::DiffusionOnly,
        }
    }
}

fn mode_name(mode: TransportMode) -> &'static str {
    match mode {
        TransportMode::AdvectionDiffusion => "advdiff",
        TransportMode::AdvectionOnly => "adv",
        TransportMode::DiffusionOnly => "diff",
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub recipe: Recipe,
    pub truth: TruthConfig,
    /// Recorded frames including the initial one.
    pub frames: usize,
    pub dt_frames: f64,
    /// Integration step of the forward simulation, s.
    pub sim_dt: f64,
    pub estimator: EstimatorConfig,
    pub noise_levels: Vec<f64>,
    pub noise_seed: u64,
    pub noise_scale: NoiseScale,
    /// Characteristic length of the scale ratios, mm.
    pub char_len: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::for_recipe(Recipe::AdvViaAdv)
    }
}

impl ExperimentConfig {
    /// Calibrated settings for a recipe on the 32³ synthetic volume.
    pub fn for_recipe(recipe: Recipe) -> Self {
        let estimator = EstimatorConfig {
            dt: 0.2,
            lr: 1000.0,
            max_iters: 700,
            max_substeps: 4,
            ..EstimatorConfig::default()
        };
        let mut cfg = Self {
            recipe,
            truth: TruthConfig::default(),
            frames: 41,
            dt_frames: 1.0,
            sim_dt: 0.05,
            estimator,
            noise_levels: vec![0.0],
            noise_seed: 7,
            noise_scale: NoiseScale::FrameMax,
            char_len: 1.0,
        };
        if recipe == Recipe::NoiseLadder {
            cfg.noise_levels = vec![0.0, 0.02, 0.04, 0.06, 0.08, 0.1];
            // twelve fits: fewer iterations each to keep the ladder tractable
            cfg.estimator.max_iters = 300;
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::Parameter("an experiment needs at least two frames".into()));
        }
        if !(self.dt_frames > 0.0 && self.sim_dt > 0.0 && self.char_len > 0.0) {
            return Err(Error::Parameter(
                "dt_frames, sim_dt and char_len must be positive".into(),
            ));
        }
        if self.noise_levels.is_empty() || self.noise_levels.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(Error::Parameter("noise levels must be finite and >= 0".into()));
        }
        self.estimator.validate()
    }
}

/// Simulates `frames` frames of the chosen process from the truth's `c0`.
pub fn simulate_truth(
    truth: &GroundTruth,
    physics: Physics,
    frames: usize,
    dt_frames: f64,
    sim_dt: f64,
) -> Result<VolumeSeries> {
    let cfg = SolverConfig {
        dt: sim_dt,
        mode: physics.mode(),
        ..SolverConfig::default()
    };
    let bd = BoundaryData::constant(truth.c0.clone());
    let span = (frames - 1) as f64 * dt_frames;
    let mut s = integrate(&truth.c0, &truth.v, &truth.d, &truth.mask, &bd, &cfg, span, dt_frames)?;
    s.meta.insert("physics".into(), physics.name().into());
    Ok(s)
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Outcome of one fit inside an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub tag: String,
    pub physics: Physics,
    pub fit_mode: TransportMode,
    pub noise_level: f64,
    /// Max-normalized MAE of ‖V‖ (advection truth only).
    pub mae_v: Option<f64>,
    /// Max-normalized MAE of D (diffusion truth only).
    pub mae_d: Option<f64>,
    /// In-mask median of the estimated D.
    pub median_d: f64,
    /// In-mask mean of the estimated ‖V‖.
    pub typical_v: f64,
    /// Size of the process that should be absent relative to the one that
    /// drives the data: `median(D)·ℓ / typical(‖V‖)` for advection truth,
    /// `typical(‖V‖)·ℓ / median(D)` for diffusion truth.
    pub scale_ratio: f64,
    pub iterations: usize,
    pub converged: bool,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputDigest {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub truth: u64,
    pub estimator: u64,
    pub noise: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub experiment: String,
    pub tool_version: String,
    pub config: ExperimentConfig,
    pub seeds: Seeds,
    pub runs: Vec<RunSummary>,
    /// Every file written next to the manifest, sorted by path.
    pub outputs: Vec<OutputDigest>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl ExperimentManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn sha256_file(path: &Path) -> Result<(String, u64)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok((hex::encode(Sha256::digest(&bytes)), bytes.len() as u64))
}

/// Digests of `files` (relative to `dir`), sorted by path.
pub fn digest_outputs(dir: &Path, files: &[String]) -> Result<Vec<OutputDigest>> {
    let mut files = files.to_vec();
    files.sort();
    files.dedup();
    files
        .into_iter()
        .map(|rel| {
            let (sha256, bytes) = sha256_file(&dir.join(&rel))?;
            Ok(OutputDigest {
                path: rel,
                sha256,
                bytes,
            })
        })
        .collect()
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Collects relative paths of written files.
struct Outputs<'a> {
    dir: &'a Path,
    files: Vec<String>,
}

impl<'a> Outputs<'a> {
    fn new(dir: &'a Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir,
            files: Vec::new(),
        })
    }

    fn path(&self, rel: &str) -> Result<PathBuf> {
        let p = self.dir.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        Ok(p)
    }

    fn field(&mut self, rel: &str, f: &ScalarField, meta: &[(&str, String)]) -> Result<()> {
        let meta: BTreeMap<String, String> = meta.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
        io::write_field(f, self.path(rel)?, meta)?;
        self.container(rel);
        Ok(())
    }

    fn series(&mut self, rel: &str, s: &VolumeSeries) -> Result<()> {
        io::write_series(s, self.path(rel)?)?;
        self.container(rel);
        Ok(())
    }

    fn container(&mut self, rel: &str) {
        let raw = Path::new(rel).with_extension("raw");
        self.files.push(rel.to_string());
        self.files.push(raw.to_string_lossy().replace('\\', "/"));
    }

    fn slice_pgm(&mut self, rel: &str, f: &ScalarField, range: (f64, f64)) -> Result<()> {
        let [_, _, nz] = f.grid().dims();
        io::export_slice_pgm(f, 2, nz / 2, Some(range), self.path(rel)?)?;
        self.files.push(rel.to_string());
        Ok(())
    }

    fn json(&mut self, rel: &str, value: &impl Serialize) -> Result<()> {
        write_json(&self.path(rel)?, value)?;
        self.files.push(rel.to_string());
        Ok(())
    }

    fn raw(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let p = self.path(rel)?;
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        self.files.push(rel.to_string());
        Ok(())
    }
}

fn level_tag(level: f64) -> String {
    format!("{:02}", (level * 100.0).round() as i64)
}

struct Scales {
    typical_v: f64,
    median_d: f64,
    ratio: f64,
    mae_v: Option<f64>,
    mae_d: Option<f64>,
}

fn scales(physics: Physics, truth: &GroundTruth, v: &VectorField, d: &ScalarField, char_len: f64) -> Result<Scales> {
    let mask = &truth.mask;
    let v_mag = v.magnitude();
    let typical_v = mask.values(&v_mag).sum::<f64>() / mask.count_inside().max(1) as f64;
    let median_d = median(&mask.values(d).collect::<Vec<_>>());
    Ok(match physics {
        Physics::Advection => Scales {
            typical_v,
            median_d,
            ratio: median_d * char_len / typical_v,
            mae_v: Some(mae_maxnorm(&v_mag, &truth.v.magnitude(), mask)?),
            mae_d: None,
        },
        Physics::Diffusion => Scales {
            typical_v,
            median_d,
            ratio: typical_v * char_len / median_d,
            mae_v: None,
            mae_d: Some(mae_maxnorm(d, &truth.d, mask)?),
        },
    })
}

pub const SUMMARY_HEADER: [&str; 11] = [
    "tag",
    "physics",
    "fit_mode",
    "noise_level",
    "mae_v",
    "mae_d",
    "median_d",
    "typical_v",
    "scale_ratio",
    "iterations",
    "converged",
];

impl RunSummary {
    pub fn cells(&self) -> Vec<Cell> {
        let opt = |v: Option<f64>| v.map(Cell::Num).unwrap_or(Cell::Text(String::new()));
        vec![
            self.tag.as_str().into(),
            self.physics.name().into(),
            mode_name(self.fit_mode).into(),
            self.noise_level.into(),
            opt(self.mae_v),
            opt(self.mae_d),
            self.median_d.into(),
            self.typical_v.into(),
            self.scale_ratio.into(),
            self.iterations.into(),
            (if self.converged { "true" } else { "false" }).into(),
        ]
    }
}

/// Runs a recipe, writing fields, slices, run manifests, a summary table
/// and the experiment manifest into `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentManifest> {
    cfg.validate()?;
    let mut outs = Outputs::new(out)?;
    let truth = ground_truth(&cfg.truth)?;
    let mid = |f: &ScalarField| f.max();
    let mut runs = Vec::new();
    let mut simulated: BTreeMap<&'static str, VolumeSeries> = BTreeMap::new();
    for (physics, mode) in cfg.recipe.runs() {
        let clean = match simulated.get(physics.name()) {
            Some(s) => s.clone(),
            None => {
                let s = simulate_truth(&truth, physics, cfg.frames, cfg.dt_frames, cfg.sim_dt)?;
                outs.series(&format!("truth/series_{}.json", physics.name()), &s)?;
                match physics {
                    Physics::Advection => {
                        let m = truth.v.magnitude();
                        outs.field("truth/v_mag.json", &m, &[("field", "v_mag".into())])?;
                        outs.slice_pgm("truth/v_mag_mid.pgm", &m, (0.0, mid(&m)))?;
                    }
                    Physics::Diffusion => {
                        outs.field("truth/d.json", &truth.d, &[("field", "d".into())])?;
                        outs.slice_pgm("truth/d_mid.pgm", &truth.d, (0.0, mid(&truth.d)))?;
                    }
                }
                simulated.insert(physics.name(), s.clone());
                s
            }
        };
        for &level in &cfg.noise_levels {
            let measured = io::add_rician_noise(&clean, level, cfg.noise_seed, cfg.noise_scale)?;
            let est_cfg = EstimatorConfig {
                mode,
                ..cfg.estimator
            };
            let t_pd = est_cfg.sample_length(measured.last_index())?;
            let result = fit(&measured, &truth.mask, &est_cfg)?;
            let tag = format!("{}_via_{}_n{}", physics.name(), mode_name(mode), level_tag(level));
            let sc = scales(physics, &truth, &result.v, &result.d, cfg.char_len)?;
            let v_mag = result.v.magnitude();
            outs.field(&format!("{tag}/v_mag.json"), &v_mag, &[("field", "v_mag".into())])?;
            outs.field(&format!("{tag}/d.json"), &result.d, &[("field", "d".into())])?;
            let v_range = match physics {
                Physics::Advection => truth.v.magnitude().max(),
                Physics::Diffusion => v_mag.max().max(f64::MIN_POSITIVE),
            };
            let d_range = match physics {
                Physics::Advection => result.d.max().max(f64::MIN_POSITIVE),
                Physics::Diffusion => truth.d.max(),
            };
            outs.slice_pgm(&format!("{tag}/v_mag_mid.pgm"), &v_mag, (0.0, v_range))?;
            outs.slice_pgm(&format!("{tag}/d_mid.pgm"), &result.d, (0.0, d_range))?;
            outs.json(&format!("{tag}/run.json"), &RunManifest::new(&est_cfg, t_pd, &result))?;
            log::info!("{tag}: mae_v {:?} mae_d {:?} ratio {:.3e}", sc.mae_v, sc.mae_d, sc.ratio);
            runs.push(RunSummary {
                tag,
                physics,
                fit_mode: mode,
                noise_level: level,
                mae_v: sc.mae_v,
                mae_d: sc.mae_d,
                median_d: sc.median_d,
                typical_v: sc.typical_v,
                scale_ratio: sc.ratio,
                iterations: result.iterations,
                converged: result.converged,
                final_loss: result.loss_history.last().map(|l| l.total).unwrap_or(f64::NAN),
            });
        }
    }
    let rows: Vec<Vec<Cell>> = runs.iter().map(RunSummary::cells).collect();
    outs.raw("summary.csv", io::csv_string(&SUMMARY_HEADER, &rows).as_bytes())?;
    let manifest = ExperimentManifest {
        experiment: cfg.recipe.name().into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        config: cfg.clone(),
        seeds: Seeds {
            truth: cfg.truth.seed,
            estimator: cfg.estimator.rng_seed,
            noise: cfg.noise_seed,
        },
        runs,
        outputs: digest_outputs(out, &outs.files)?,
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Differences between recorded output digests and those of a rerun.
pub fn compare_outputs(recorded: &[OutputDigest], fresh: &[OutputDigest]) -> Vec<String> {
    let index: BTreeMap<&str, &OutputDigest> = fresh.iter().map(|o| (o.path.as_str(), o)).collect();
    let mut problems = Vec::new();
    for o in recorded {
        match index.get(o.path.as_str()) {
            None => problems.push(format!("{} missing from rerun", o.path)),
            Some(f) if f.sha256 != o.sha256 => problems.push(format!("{} differs", o.path)),
            _ => {}
        }
    }
    if fresh.len() != recorded.len() {
        problems.push(format!(
            "rerun wrote {} files, manifest lists {}",
            fresh.len(),
            recorded.len()
        ));
    }
    problems
}

/// Re-runs the experiment (or demo) recorded in `manifest_path` into `out`
/// and lists every output whose digest differs.
pub fn verify_rerun(manifest_path: &Path, out: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    if value.get("experiment").and_then(|e| e.as_str()) == Some(DEMO2D) {
        let recorded: DemoManifest = serde_json::from_value(value)?;
        let fresh = run_demo2d(&recorded.config, out)?.manifest;
        return Ok(compare_outputs(&recorded.outputs, &fresh.outputs));
    }
    let recorded: ExperimentManifest = serde_json::from_value(value)?;
    let fresh = run_experiment(&recorded.config, out)?;
    Ok(compare_outputs(&recorded.outputs, &fresh.outputs))
}

pub const DEMO2D: &str = "demo2d";

/// Planar toy problem: constant V and D acting on a Gaussian blob.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Demo2dConfig {
    pub size: usize,
    pub spacing_mm: f64,
    pub velocity: [f64; 2],
    pub diffusivity: f64,
    pub blob_sigma_mm: f64,
    pub blob_peak: f64,
    pub frames: usize,
    pub dt_frames: f64,
    pub sim_dt: f64,
    pub estimator: EstimatorConfig,
}

impl Default for Demo2dConfig {
    fn default() -> Self {
        Self {
            size: 64,
            spacing_mm: 1.0,
            velocity: [0.4, 0.2],
            diffusivity: 0.05,
            blob_sigma_mm: 12.0,
            blob_peak: 2.0,
            frames: 41,
            dt_frames: 1.0,
            sim_dt: 0.05,
            estimator: EstimatorConfig {
                mode: TransportMode::AdvectionDiffusion,
                dt: 0.2,
                lr: 50.0,
                max_iters: 400,
                max_substeps: 4,
                ..EstimatorConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoManifest {
    pub experiment: String,
    pub tool_version: String,
    pub config: Demo2dConfig,
    pub mae_v: f64,
    pub mae_d: f64,
    pub iterations: usize,
    pub outputs: Vec<OutputDigest>,
}

pub struct DemoReport {
    pub manifest: DemoManifest,
    pub measured: VolumeSeries,
    pub predicted: VolumeSeries,
}

/// Frames shown side by side in the demo images.
const DEMO_SHOWN: [usize; 5] = [0, 10, 20, 30, 40];

/// Ground truth of the planar demo: flow, diffusivity and blob start.
pub struct DemoTruth {
    pub mask: DomainMask,
    pub v: VectorField,
    pub d: ScalarField,
    pub c0: ScalarField,
}

pub fn demo_truth(cfg: &Demo2dConfig) -> Result<DemoTruth> {
    if cfg.size < 4 || cfg.frames < 2 {
        return Err(Error::Parameter("demo2d needs size >= 4 and at least two frames".into()));
    }
    let grid = Grid3::new([cfg.size, cfg.size, 1], [cfg.spacing_mm, cfg.spacing_mm, cfg.spacing_mm])?;
    let mask = DomainMask::full(grid);
    let v = VectorField::constant(grid, [cfg.velocity[0], cfg.velocity[1], 0.0]);
    let d = ScalarField::constant(grid, cfg.diffusivity);
    // blob starts upstream of the centre so it stays inside while moving
    let span = (cfg.frames - 1) as f64 * cfg.dt_frames;
    let centre = (cfg.size as f64 - 1.0) * cfg.spacing_mm / 2.0;
    let c = [centre - 0.5 * span * cfg.velocity[0], centre - 0.5 * span * cfg.velocity[1]];
    let s2 = cfg.blob_sigma_mm * cfg.blob_sigma_mm;
    let c0 = ScalarField::from_fn(grid, |x, y, _| {
        let dx = x as f64 * cfg.spacing_mm - c[0];
        let dy = y as f64 * cfg.spacing_mm - c[1];
        cfg.blob_peak * (-(dx * dx + dy * dy) / (2.0 * s2)).exp()
    });
    Ok(DemoTruth { mask, v, d, c0 })
}

pub fn run_demo2d(cfg: &Demo2dConfig, out: &Path) -> Result<DemoReport> {
    cfg.estimator.validate()?;
    let mut outs = Outputs::new(out)?;
    let DemoTruth { mask, v, d, c0 } = demo_truth(cfg)?;
    let span = (cfg.frames - 1) as f64 * cfg.dt_frames;
    let sim = SolverConfig {
        dt: cfg.sim_dt,
        ..SolverConfig::default()
    };
    let bd = BoundaryData::constant(c0.clone());
    let measured = integrate(&c0, &v, &d, &mask, &bd, &sim, span, cfg.dt_frames)?;
    let result = fit(&measured, &mask, &cfg.estimator)?;
    let predicted = predict_series(&result, &c0, &mask, &bd, &cfg.estimator, cfg.frames)?;
    let mae_v = mae_maxnorm(&result.v.magnitude(), &v.magnitude(), &mask)?;
    let mae_d = mae_maxnorm(&result.d, &d, &mask)?;

    outs.series("measured.json", &measured)?;
    outs.series("predicted.json", &predicted)?;
    outs.field("v_mag.json", &result.v.magnitude(), &[("field", "v_mag".into())])?;
    outs.field("d.json", &result.d, &[("field", "d".into())])?;
    let range = (0.0, measured.frames()[0].max());
    for &f in DEMO_SHOWN.iter().filter(|&&f| f < cfg.frames) {
        let pgm = side_by_side(&measured.frames()[f], &predicted.frames()[f], range)?;
        outs.raw(&format!("frame_{f:02}.pgm"), &pgm)?;
    }
    let t_pd = cfg.estimator.sample_length(measured.last_index())?;
    outs.json("run.json", &RunManifest::new(&cfg.estimator, t_pd, &result))?;
    let manifest = DemoManifest {
        experiment: DEMO2D.into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        config: cfg.clone(),
        mae_v,
        mae_d,
        iterations: result.iterations,
        outputs: digest_outputs(out, &outs.files)?,
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(DemoReport {
        manifest,
        measured,
        predicted,
    })
}

/// Measured (left) and predicted (right) planar frames in one image, with
/// a one-pixel black gutter.
fn side_by_side(a: &ScalarField, b: &ScalarField, range: (f64, f64)) -> Result<Vec<u8>> {
    let (w, h, left) = io::slice(a, 2, 0)?;
    let (_, _, right) = io::slice(b, 2, 0)?;
    let width = 2 * w + 1;
    let mut vals = Vec::with_capacity(width * h);
    for r in 0..h {
        vals.extend_from_slice(&left[r * w..(r + 1) * w]);
        vals.push(range.0);
        vals.extend_from_slice(&right[r * w..(r + 1) * w]);
    }
    Ok(io::encode_pgm(width, h, &vals, Some(range)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recipe_names_round_trip() {
        for r in Recipe::ALL {
            assert_eq!(Recipe::parse(r.name()).unwrap(), r);
            let json = serde_json::to_string(&r).unwrap();
            assert_eq!(json, format!("\"{}\"", r.name()));
        }
        assert!(Recipe::parse("adv").is_err());
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn level_tags() {
        assert_eq!(level_tag(0.0), "00");
        assert_eq!(level_tag(0.06), "06");
        assert_eq!(level_tag(0.1), "10");
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = ExperimentConfig::for_recipe(Recipe::NoiseLadder);
        let text = serde_json::to_string(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn validation() {
        let mut cfg = ExperimentConfig {
            noise_levels: vec![-0.1],
            ..ExperimentConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg.noise_levels = vec![];
        assert!(cfg.validate().is_err());
        let cfg = ExperimentConfig {
            frames: 1,
            ..ExperimentConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
