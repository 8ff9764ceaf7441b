use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use pdeflow::estimator::{fit, predict_series, EstimatorConfig, RunManifest};
use pdeflow::experiment::{
    self, compare_outputs, run_demo2d, run_experiment, Demo2dConfig, ExperimentConfig,
    ExperimentManifest, Physics, Recipe, DEMO2D,
};
use pdeflow::io::{self, Cell, NoiseScale};
use pdeflow::metrics::{metric_row, mirror_mask, MidlineAxis, TTest, METRIC_HEADER};
use pdeflow::params::{feature_maps, PECLET_SENTINEL};
use pdeflow::solver::BoundaryData;
use pdeflow::synthetic::{ground_truth, TruthConfig};
use pdeflow::{DomainMask, ScalarField, VectorField, VolumeSeries};

use crate::config::{layered, peek};
use crate::{Args, CliError, Command};

type Result<T> = std::result::Result<T, CliError>;

/// Options shared by every command.
pub struct Common {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub sets: Vec<String>,
}

impl Common {
    pub(crate) fn from_args(a: &Args) -> Self {
        Self {
            config: a.config.clone(),
            seed: a.seed,
            out: a.out.clone(),
            sets: a.sets.clone(),
        }
    }

    fn file(&self) -> Result<Option<Value>> {
        let Some(p) = &self.config else { return Ok(None) };
        let text = fs::read_to_string(p)
            .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", p.display())))?;
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| CliError::Usage(format!("{} is not valid JSON: {e}", p.display())))
    }

    fn out_dir(&self, command: &str) -> Result<PathBuf> {
        let dir = self
            .out
            .clone()
            .unwrap_or_else(|| PathBuf::from("pdeflow-out").join(command));
        fs::create_dir_all(&dir)
            .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))?;
        Ok(dir)
    }
}

pub fn run(cmd: Command, c: &Common) -> Result<()> {
    match cmd {
        Command::Demo2d => demo2d(c),
        Command::Simulate => simulate(c),
        Command::Noise => noise(c),
        Command::Estimate => estimate(c),
        Command::Metrics => metrics(c),
        Command::Convert => convert(c),
        Command::Featuremaps => featuremaps(c),
        Command::Experiment => experiment_cmd(c),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Usage(e.to_string()))?;
    fs::write(path, text + "\n")
        .map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))
}

fn required(path: &str, what: &str) -> Result<PathBuf> {
    if path.is_empty() {
        return Err(CliError::Usage(format!("{what} is required (set it with --set {what}=PATH)")));
    }
    Ok(PathBuf::from(path))
}

fn meta(field: &str) -> BTreeMap<String, String> {
    BTreeMap::from([("field".to_string(), field.to_string())])
}

fn read_field(path: &Path) -> Result<ScalarField> {
    let s = io::read_series(path)?;
    Ok(s.frames()[0].clone())
}

fn demo2d(c: &Common) -> Result<()> {
    let mut cfg: Demo2dConfig = layered(&Demo2dConfig::default(), c.file()?.as_ref(), &c.sets)?;
    if let Some(s) = c.seed {
        cfg.estimator.rng_seed = s;
    }
    let out = c.out_dir(DEMO2D)?;
    let report = run_demo2d(&cfg, &out)?;
    println!(
        "demo2d: MAE |V| {:.4} (target <= 0.1), MAE D {:.4}, {} iterations; frames in {}",
        report.manifest.mae_v,
        report.manifest.mae_d,
        report.manifest.iterations,
        out.display()
    );
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
struct SimulateConfig {
    truth: TruthConfig,
    physics: Physics,
    frames: usize,
    dt_frames: f64,
    sim_dt: f64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        let e = ExperimentConfig::default();
        Self {
            truth: e.truth,
            physics: Physics::Advection,
            frames: e.frames,
            dt_frames: e.dt_frames,
            sim_dt: e.sim_dt,
        }
    }
}

fn write_velocity(dir: &Path, v: &VectorField) -> Result<()> {
    for (name, comp) in ["vx", "vy", "vz"].iter().zip(v.components()) {
        io::write_field(comp, dir.join(format!("{name}.json")), meta(name))?;
    }
    io::write_field(&v.magnitude(), dir.join("v_mag.json"), meta("v_mag"))?;
    Ok(())
}

fn simulate(c: &Common) -> Result<()> {
    let mut cfg: SimulateConfig = layered(&SimulateConfig::default(), c.file()?.as_ref(), &c.sets)?;
    if let Some(s) = c.seed {
        cfg.truth.seed = s;
    }
    if cfg.frames < 2 {
        return Err(CliError::Usage("frames must be at least 2".into()));
    }
    let out = c.out_dir("simulate")?;
    let truth = ground_truth(&cfg.truth)?;
    let series = experiment::simulate_truth(&truth, cfg.physics, cfg.frames, cfg.dt_frames, cfg.sim_dt)?;
    io::write_series(&series, out.join("series.json"))?;
    write_velocity(&out, &truth.v)?;
    io::write_field(&truth.d, out.join("d.json"), meta("d"))?;
    io::write_mask(truth.grid(), truth.mask.inside(), out.join("mask.json"))?;
    write_json(&out.join("config.json"), &cfg)?;
    println!("simulate: {} frames of {:?} on {:?} in {}", series.len(), cfg.physics, truth.grid().dims(), out.display());
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
struct NoiseConfig {
    input: String,
    level: f64,
    seed: u64,
    scale: NoiseScale,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            input: String::new(),
            level: 0.02,
            seed: 7,
            scale: NoiseScale::FrameMax,
        }
    }
}

fn noise(c: &Common) -> Result<()> {
    let mut cfg: NoiseConfig = layered(&NoiseConfig::default(), c.file()?.as_ref(), &c.sets)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    let series = io::read_series(required(&cfg.input, "input")?)?;
    let noisy = io::add_rician_noise(&series, cfg.level, cfg.seed, cfg.scale)?;
    let out = c.out_dir("noise")?;
    io::write_series(&noisy, out.join("series.json"))?;
    println!("noise: level {} seed {} -> {}", cfg.level, cfg.seed, out.join("series.json").display());
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
struct EstimateConfig {
    input: String,
    /// Optional domain mask; the whole grid otherwise.
    mask: String,
    dirichlet_slabs: bool,
    estimator: EstimatorConfig,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        Self {
            input: String::new(),
            mask: String::new(),
            dirichlet_slabs: false,
            estimator: ExperimentConfig::default().estimator,
        }
    }
}

fn load_mask(path: &str, series: &VolumeSeries, slabs: bool) -> Result<DomainMask> {
    let grid = *series.grid();
    if path.is_empty() {
        return Ok(DomainMask::new(grid, vec![true; grid.len()], slabs)?);
    }
    let (mgrid, inside) = io::read_mask(path)?;
    grid.ensure_same(&mgrid, "mask")?;
    Ok(DomainMask::new(grid, inside, slabs)?)
}

fn estimate(c: &Common) -> Result<()> {
    let mut cfg: EstimateConfig = layered(&EstimateConfig::default(), c.file()?.as_ref(), &c.sets)?;
    if let Some(s) = c.seed {
        cfg.estimator.rng_seed = s;
    }
    let series = io::read_series(required(&cfg.input, "input")?)?;
    let mask = load_mask(&cfg.mask, &series, cfg.dirichlet_slabs)?;
    let est = cfg.estimator;
    let t_pd = est.sample_length(series.last_index())?;
    let result = fit(&series, &mask, &est)?;
    let bd = BoundaryData::from_series(&series, est.dirichlet_interp);
    let predicted = predict_series(&result, &series.frames()[0], &mask, &bd, &est, series.len())?;
    let out = c.out_dir("estimate")?;
    write_velocity(&out, &result.v)?;
    io::write_field(&result.d, out.join("d.json"), meta("d"))?;
    io::write_series(&predicted, out.join("predicted.json"))?;
    write_json(&out.join("run.json"), &RunManifest::new(&est, t_pd, &result))?;
    let last = result.loss_history.last().map(|l| l.total).unwrap_or(f64::NAN);
    println!(
        "estimate: {} iterations (converged: {}), final loss {last:.6e}; fields in {}",
        result.iterations,
        result.converged,
        out.display()
    );
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
struct MetricsConfig {
    /// Field containers to evaluate, named by file stem in the output.
    fields: Vec<String>,
    lesion: String,
    /// Optional domain mask restricting the mirrored region.
    mask: String,
    midline_axis: MidlineAxis,
    /// Reflection index; the middle of the axis when absent.
    midline_index: Option<usize>,
    test: TTest,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            fields: Vec::new(),
            lesion: String::new(),
            mask: String::new(),
            midline_axis: MidlineAxis::X,
            midline_index: None,
            test: TTest::Welch,
        }
    }
}

fn metrics(c: &Common) -> Result<()> {
    let cfg: MetricsConfig = layered(&MetricsConfig::default(), c.file()?.as_ref(), &c.sets)?;
    if cfg.fields.is_empty() {
        return Err(CliError::Usage("fields must list at least one field container".into()));
    }
    let (grid, lesion) = io::read_mask(required(&cfg.lesion, "lesion")?)?;
    let domain = if cfg.mask.is_empty() {
        DomainMask::full(grid)
    } else {
        let (g, inside) = io::read_mask(&cfg.mask)?;
        grid.ensure_same(&g, "domain mask")?;
        DomainMask::new(grid, inside, false)?
    };
    let axis = match cfg.midline_axis {
        MidlineAxis::X => 0,
        MidlineAxis::Y => 1,
    };
    let index = cfg.midline_index.unwrap_or(grid.dims()[axis] / 2);
    let pair = mirror_mask(&lesion, cfg.midline_axis, index, &domain)?;
    let mut rows = Vec::new();
    for path in &cfg.fields {
        let p = Path::new(path);
        let f = read_field(p)?;
        grid.ensure_same(f.grid(), "field")?;
        let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        rows.push(metric_row(&name, &f, &pair, cfg.test).cells());
    }
    let out = c.out_dir("metrics")?;
    io::export_csv(out.join("metrics.csv"), &METRIC_HEADER, &rows)?;
    print!("{}", io::csv_string(&METRIC_HEADER, &rows));
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
struct ConvertConfig {
    input: String,
    baseline_frames: usize,
    kmr_over_te: f64,
}

impl Default for ConvertConfig {
    fn default() -> Self {
        Self {
            input: String::new(),
            baseline_frames: 1,
            kmr_over_te: 1.0,
        }
    }
}

fn convert(c: &Common) -> Result<()> {
    let cfg: ConvertConfig = layered(&ConvertConfig::default(), c.file()?.as_ref(), &c.sets)?;
    let signal = io::read_series(required(&cfg.input, "input")?)?;
    let conv = io::signal_to_concentration(&signal, cfg.baseline_frames, cfg.kmr_over_te)?;
    let out = c.out_dir("convert")?;
    io::write_series(&conv.series, out.join("concentration.json"))?;
    println!(
        "convert: {} frames, {} flagged voxel-frames, {} clamped negatives",
        conv.series.len(),
        conv.flagged,
        conv.clamped
    );
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
struct FeatureConfig {
    /// Directory holding `vx.json`, `vy.json`, `vz.json` and `d.json`.
    input: String,
    char_len: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            input: String::new(),
            char_len: 1.0,
        }
    }
}

/// Containers reject non-finite payloads, so the Péclet sentinel is
/// written as the largest `f32`.
fn finite_sentinel(f: &ScalarField) -> ScalarField {
    f.map(|x| if x == PECLET_SENTINEL { f32::MAX as f64 } else { x })
}

fn featuremaps(c: &Common) -> Result<()> {
    let cfg: FeatureConfig = layered(&FeatureConfig::default(), c.file()?.as_ref(), &c.sets)?;
    let dir = required(&cfg.input, "input")?;
    let comp = |n: &str| read_field(&dir.join(format!("{n}.json")));
    let v = VectorField::new(comp("vx")?, comp("vy")?, comp("vz")?)?;
    let d = comp("d")?;
    let maps = feature_maps(&v, &d, cfg.char_len)?;
    let out = c.out_dir("featuremaps")?;
    io::write_field(&maps.v_mag, out.join("v_mag.json"), meta("v_mag"))?;
    for (name, ch) in ["v_rgb_x", "v_rgb_y", "v_rgb_z"].iter().zip(&maps.v_rgb) {
        io::write_field(ch, out.join(format!("{name}.json")), meta(name))?;
    }
    io::write_field(&maps.d, out.join("d.json"), meta("d"))?;
    let mut pe_meta = meta("peclet");
    pe_meta.insert("sentinel".into(), (f32::MAX as f64).to_string());
    io::write_field(&finite_sentinel(&maps.peclet), out.join("peclet.json"), pe_meta.clone())?;
    pe_meta.insert("field".into(), "inv_peclet".into());
    io::write_field(&finite_sentinel(&maps.inv_peclet), out.join("inv_peclet.json"), pe_meta)?;
    let nz = maps.v_mag.grid().dims()[2];
    io::export_slice_pgm(&maps.v_mag, 2, nz / 2, None, out.join("v_mag_mid.pgm"))?;
    io::export_slice_pgm(&maps.d, 2, nz / 2, None, out.join("d_mid.pgm"))?;
    println!("featuremaps: written to {}", out.display());
    Ok(())
}

fn print_runs(m: &ExperimentManifest) {
    let rows: Vec<Vec<Cell>> = m.runs.iter().map(|r| r.cells()).collect();
    print!("{}", io::csv_string(&experiment::SUMMARY_HEADER, &rows));
}

fn experiment_cmd(c: &Common) -> Result<()> {
    let file = c.file()?;
    // a manifest carries its full config: re-run it and compare digests
    if let Some(f) = file.as_ref().filter(|f| f.get("outputs").is_some()) {
        if !c.sets.is_empty() || c.seed.is_some() {
            return Err(CliError::Usage("a manifest is re-run as recorded; drop --set and --seed".into()));
        }
        let out = c.out_dir("rerun")?;
        let problems = if f.get("experiment").and_then(Value::as_str) == Some(DEMO2D) {
            let rec: experiment::DemoManifest = serde_json::from_value(f.clone()).map_err(|e| CliError::Usage(e.to_string()))?;
            compare_outputs(&rec.outputs, &run_demo2d(&rec.config, &out)?.manifest.outputs)
        } else {
            let rec: ExperimentManifest = serde_json::from_value(f.clone()).map_err(|e| CliError::Usage(e.to_string()))?;
            let fresh = run_experiment(&rec.config, &out)?;
            print_runs(&fresh);
            compare_outputs(&rec.outputs, &fresh.outputs)
        };
        if !problems.is_empty() {
            return Err(CliError::Mismatch(problems));
        }
        println!("experiment: re-run reproduced every recorded output in {}", out.display());
        return Ok(());
    }
    let recipe = match peek(file.as_ref(), &c.sets, "recipe") {
        Some(v) => {
            let name = v.as_str().ok_or_else(|| CliError::Usage("recipe must be a string".into()))?;
            Recipe::parse(name)?
        }
        None => Recipe::AdvViaAdv,
    };
    let mut cfg: ExperimentConfig = layered(&ExperimentConfig::for_recipe(recipe), file.as_ref(), &c.sets)?;
    if let Some(s) = c.seed {
        cfg.truth.seed = s;
        cfg.estimator.rng_seed = s;
        cfg.noise_seed = s;
    }
    let out = c.out_dir(recipe.name())?;
    let m = run_experiment(&cfg, &out)?;
    print_runs(&m);
    println!("experiment {}: manifest at {}", m.experiment, out.join(experiment::MANIFEST_FILE).display());
    Ok(())
}
