//! Volume-series container, signal conversion, noise and exports.
//!
//! A series is stored as a JSON header plus a raw payload of little-endian
//! `f32` values, x fastest, frame-major. Masks use the same layout with one
//! `u8` (0 or 1) per voxel.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid3, ScalarField};
use crate::series::VolumeSeries;

pub const MAGIC: &str = "PFVS";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub magic: String,
    pub version: u32,
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub dt_s: f64,
    pub frames: usize,
    pub dtype: String,
    pub data_file: String,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

fn header_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Header {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn data_path(header_path: &Path) -> (PathBuf, String) {
    let name = header_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "data".into());
    let file = format!("{name}.raw");
    (header_path.with_file_name(&file), file)
}

fn write_container(path: &Path, mut header: Header, payload: &[u8]) -> Result<()> {
    let (raw_path, raw_name) = data_path(path);
    header.data_file = raw_name;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&raw_path, payload).map_err(|e| Error::io(&raw_path, e))?;
    let text = serde_json::to_string_pretty(&header)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_container(path: &Path, dtype: &str) -> Result<(Header, Grid3, Vec<u8>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header: Header =
        serde_json::from_str(&text).map_err(|e| header_err(path, e.to_string()))?;
    if header.magic != MAGIC {
        return Err(header_err(path, format!("magic is {:?}, expected {MAGIC:?}", header.magic)));
    }
    if header.version != VERSION {
        return Err(header_err(path, format!("unsupported version {}", header.version)));
    }
    if header.dtype != dtype {
        return Err(header_err(path, format!("dtype {:?}, expected {dtype:?}", header.dtype)));
    }
    if header.frames == 0 {
        return Err(header_err(path, "frame count must be at least 1"));
    }
    if !(header.dt_s > 0.0 && header.dt_s.is_finite()) {
        return Err(header_err(path, format!("dt_s must be positive, got {}", header.dt_s)));
    }
    let grid = Grid3::new(header.dims, header.spacing_mm)
        .map_err(|e| header_err(path, e.to_string()))?;
    let raw_path = path.with_file_name(&header.data_file);
    let payload = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let width = if dtype == "u8" { 1 } else { 4 };
    let expected = (header.frames * grid.len() * width) as u64;
    if payload.len() as u64 != expected {
        return Err(Error::ByteCount {
            path: raw_path,
            expected,
            actual: payload.len() as u64,
        });
    }
    Ok((header, grid, payload))
}

/// Writes `series` to `path` (header) and a sibling `.raw` payload.
pub fn write_series(series: &VolumeSeries, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let grid = series.grid();
    let mut payload = Vec::with_capacity(series.len() * grid.len() * 4);
    for f in series.frames() {
        for &v in f.as_slice() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let header = Header {
        magic: MAGIC.into(),
        version: VERSION,
        dims: grid.dims(),
        spacing_mm: grid.spacing(),
        dt_s: series.dt_frames(),
        frames: series.len(),
        dtype: "f32le".into(),
        data_file: String::new(),
        meta: series.meta.clone(),
    };
    write_container(path, header, &payload)
}

pub fn read_series(path: impl AsRef<Path>) -> Result<VolumeSeries> {
    let path = path.as_ref();
    let (header, grid, payload) = read_container(path, "f32le")?;
    let n = grid.len();
    let mut frames = Vec::with_capacity(header.frames);
    for chunk in payload.chunks_exact(n * 4) {
        let data: Vec<f64> = chunk
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("payload of {}", path.display())));
        }
        frames.push(ScalarField::new(grid, data)?);
    }
    let mut s = VolumeSeries::new(header.dt_s, frames)?;
    s.meta = header.meta;
    Ok(s)
}

/// Writes a single field as a one-frame series.
pub fn write_field(f: &ScalarField, path: impl AsRef<Path>, meta: BTreeMap<String, String>) -> Result<()> {
    let mut s = VolumeSeries::new(1.0, vec![f.clone()])?;
    s.meta = meta;
    write_series(&s, path)
}

pub fn write_mask(grid: &Grid3, inside: &[bool], path: impl AsRef<Path>) -> Result<()> {
    if inside.len() != grid.len() {
        return Err(Error::GridMismatch(format!(
            "mask has {} voxels, grid needs {}",
            inside.len(),
            grid.len()
        )));
    }
    let header = Header {
        magic: MAGIC.into(),
        version: VERSION,
        dims: grid.dims(),
        spacing_mm: grid.spacing(),
        dt_s: 1.0,
        frames: 1,
        dtype: "u8".into(),
        data_file: String::new(),
        meta: BTreeMap::new(),
    };
    let payload: Vec<u8> = inside.iter().map(|&b| b as u8).collect();
    write_container(path.as_ref(), header, &payload)
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<(Grid3, Vec<bool>)> {
    let path = path.as_ref();
    let (header, grid, payload) = read_container(path, "u8")?;
    if header.frames != 1 {
        return Err(header_err(path, "a mask has exactly one frame"));
    }
    let inside = payload
        .iter()
        .map(|&b| match b {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(header_err(path, format!("mask value {other} is not 0 or 1"))),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((grid, inside))
}

/// Result of converting raw signal to concentration.
#[derive(Clone, Debug)]
pub struct Conversion {
    pub series: VolumeSeries,
    /// Voxel-frames with `S ≤ 0` or `S₀ ≤ 0`, set to zero.
    pub flagged: usize,
    /// Negative concentrations clamped to zero.
    pub clamped: usize,
}

/// `C = −k · ln(S / S₀)` with `S₀` the mean of the first `b` frames.
pub fn signal_to_concentration(s: &VolumeSeries, b: usize, kmr_over_te: f64) -> Result<Conversion> {
    if b == 0 || b > s.len() {
        return Err(Error::Parameter(format!(
            "baseline frame count {b} must lie in 1..={}",
            s.len()
        )));
    }
    if !(kmr_over_te > 0.0 && kmr_over_te.is_finite()) {
        return Err(Error::Parameter(format!(
            "kmr_over_te must be positive, got {kmr_over_te}"
        )));
    }
    let grid = *s.grid();
    let s0: Vec<f64> = (0..grid.len())
        .map(|i| s.frames()[..b].iter().map(|f| f.as_slice()[i]).sum::<f64>() / b as f64)
        .collect();
    let (mut flagged, mut clamped) = (0, 0);
    let mut frames = Vec::with_capacity(s.len());
    for f in s.frames() {
        let data = f
            .as_slice()
            .iter()
            .zip(&s0)
            .map(|(&si, &base)| {
                if !(si > 0.0 && base > 0.0) {
                    flagged += 1;
                    return 0.0;
                }
                let c = -kmr_over_te * (si / base).ln();
                if c < 0.0 {
                    clamped += 1;
                    0.0
                } else {
                    c
                }
            })
            .collect();
        frames.push(ScalarField::new(grid, data)?);
    }
    let mut series = VolumeSeries::new(s.dt_frames(), frames)?;
    series.meta = s.meta.clone();
    series.meta.insert("baseline_frames".into(), b.to_string());
    series.meta.insert("kmr_over_te".into(), kmr_over_te.to_string());
    series.meta.insert("flagged_voxels".into(), flagged.to_string());
    series.meta.insert("clamped_negative".into(), clamped.to_string());
    if clamped > 0 {
        log::warn!("clamped {clamped} negative concentrations to zero");
    }
    Ok(Conversion {
        series,
        flagged,
        clamped,
    })
}

/// How the Rician noise amplitude is derived from the noise level.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum NoiseScale {
    /// `σ = level · max(frame)`, one value per frame.
    #[default]
    FrameMax,
    /// `σ = level · C(x)` at every voxel.
    Pointwise,
}

/// `C' = √((C + n₁)² + n₂²)` with `n₁, n₂ ~ N(0, σ²)`; frame `f` draws
/// from substream `f` of the seeded generator.
pub fn add_rician_noise(v: &VolumeSeries, level: f64, seed: u64, scale: NoiseScale) -> Result<VolumeSeries> {
    if !(level >= 0.0 && level.is_finite()) {
        return Err(Error::Parameter(format!("noise level must be >= 0, got {level}")));
    }
    if level == 0.0 {
        return Ok(v.clone());
    }
    let grid = *v.grid();
    let mut frames = Vec::with_capacity(v.len());
    for (k, f) in v.frames().iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        let frame_sigma = level * f.max();
        let data = f
            .as_slice()
            .iter()
            .map(|&c| {
                let sigma = match scale {
                    NoiseScale::FrameMax => frame_sigma,
                    NoiseScale::Pointwise => level * c.abs(),
                };
                let n1: f64 = rng.sample(StandardNormal);
                let n2: f64 = rng.sample(StandardNormal);
                ((c + sigma * n1).powi(2) + (sigma * n2).powi(2)).sqrt()
            })
            .collect();
        frames.push(ScalarField::new(grid, data)?);
    }
    let mut out = VolumeSeries::new(v.dt_frames(), frames)?;
    out.meta = v.meta.clone();
    out.meta.insert("rician_level".into(), level.to_string());
    out.meta.insert("rician_seed".into(), seed.to_string());
    Ok(out)
}

/// 2D slice perpendicular to `axis` as row-major `(width, height, values)`.
pub fn slice(f: &ScalarField, axis: usize, index: usize) -> Result<(usize, usize, Vec<f64>)> {
    let dims = f.grid().dims();
    if axis > 2 || index >= dims[axis] {
        return Err(Error::Parameter(format!(
            "slice {index} along axis {axis} is outside dims {dims:?}"
        )));
    }
    let (u, w) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let mut vals = Vec::with_capacity(dims[u] * dims[w]);
    for j in 0..dims[w] {
        for i in 0..dims[u] {
            let mut c = [0; 3];
            c[axis] = index;
            c[u] = i;
            c[w] = j;
            vals.push(f.get(c[0], c[1], c[2]));
        }
    }
    Ok((dims[u], dims[w], vals))
}

/// Encodes values as a 16-bit binary PGM, mapping `range` linearly onto
/// `0..=65535` and clamping. `None` uses the finite min/max of the values.
pub fn encode_pgm(width: usize, height: usize, values: &[f64], range: Option<(f64, f64)>) -> Vec<u8> {
    let (lo, hi) = range.unwrap_or_else(|| {
        let finite = values.iter().copied().filter(|v| v.is_finite());
        let lo = finite.clone().fold(f64::INFINITY, f64::min);
        let hi = finite.fold(f64::NEG_INFINITY, f64::max);
        if lo.is_finite() {
            (lo, hi)
        } else {
            (0.0, 1.0)
        }
    });
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for &v in values {
        let t = if v.is_nan() {
            0.0
        } else if hi > lo {
            ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
        } else if v > hi {
            1.0
        } else {
            0.0
        };
        let q = (t * 65535.0).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    out
}

pub fn export_slice_pgm(
    f: &ScalarField,
    axis: usize,
    index: usize,
    range: Option<(f64, f64)>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let (w, h, vals) = slice(f, axis, index)?;
    let path = path.as_ref();
    fs::write(path, encode_pgm(w, h, &vals, range)).map_err(|e| Error::io(path, e))
}

/// A CSV cell.
#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Text(String),
    Int(i64),
    Num(f64),
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Text(s.into())
    }
}

impl From<String> for Cell {
    fn from(s: String) -> Self {
        Cell::Text(s)
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

/// Nine significant digits, shortest of fixed or exponent notation.
pub fn format_sig9(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return "0".into();
    }
    let exp = v.abs().log10().floor() as i32;
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let s = format!("{v:.decimals$}");
        // rounding may carry into a new digit; reparse keeps 9 digits
        let s = if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        };
        if s == "-0" {
            "0".into()
        } else {
            s
        }
    } else {
        let s = format!("{v:.8e}");
        let (mant, e) = s.split_once('e').expect("exponent form");
        let mant = mant.trim_end_matches('0').trim_end_matches('.');
        format!("{mant}e{e}")
    }
}

fn csv_escape(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn csv_string(header: &[&str], rows: &[Vec<Cell>]) -> String {
    let mut out = header.iter().map(|h| csv_escape(h)).collect::<Vec<_>>().join(",");
    out.push('\n');
    for row in rows {
        let line: Vec<String> = row
            .iter()
            .map(|c| match c {
                Cell::Text(s) => csv_escape(s),
                Cell::Int(i) => i.to_string(),
                Cell::Num(v) => format_sig9(*v),
            })
            .collect();
        let _ = writeln!(out, "{}", line.join(","));
    }
    out
}

pub fn export_csv(path: impl AsRef<Path>, header: &[&str], rows: &[Vec<Cell>]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, csv_string(header, rows)).map_err(|e| Error::io(path, e))
}
