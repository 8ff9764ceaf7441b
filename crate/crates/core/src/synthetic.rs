//! Band-limited random ground truth for recovery experiments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{DomainMask, Grid3, ScalarField, VectorField};
use crate::params::{velocity_from_potentials, Potentials};

/// Sum of `modes` random plane waves with wavelengths in
/// `[min_wavelength, max_wavelength]` mm, rescaled to zero mean and unit
/// peak magnitude. Planar grids draw in-plane wave vectors only.
pub fn random_smooth_field(
    grid: Grid3,
    rng: &mut impl Rng,
    modes: usize,
    min_wavelength: f64,
    max_wavelength: f64,
) -> ScalarField {
    let planar = grid.is_planar();
    let waves: Vec<([f64; 3], f64, f64)> = (0..modes)
        .map(|_| {
            let mut dir: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
            if planar {
                dir[2] = 0.0;
            }
            let norm = dir.iter().map(|c| c * c).sum::<f64>().sqrt().max(1e-12);
            let wl = rng.gen_range(min_wavelength..=max_wavelength);
            let k = std::f64::consts::TAU / wl;
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let amp: f64 = rng.sample(StandardNormal);
            (dir.map(|c| k * c / norm), phase, amp)
        })
        .collect();
    let s = grid.spacing();
    let mut f = ScalarField::from_fn(grid, |x, y, z| {
        let p = [x as f64 * s[0], y as f64 * s[1], z as f64 * s[2]];
        waves
            .iter()
            .map(|(k, ph, a)| a * (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + ph).cos())
            .sum()
    });
    let mean = f.sum() / grid.len() as f64;
    let peak = f
        .as_slice()
        .iter()
        .map(|v| (v - mean).abs())
        .fold(0.0, f64::max)
        .max(1e-300);
    for v in f.as_mut_slice() {
        *v = (*v - mean) / peak;
    }
    f
}

/// Smooth bump that is 1 in the middle and falls to 0 at the grid edges
/// along every axis with more than one voxel.
pub fn edge_window(grid: Grid3) -> ScalarField {
    let dims = grid.dims();
    let w = |i: usize, n: usize| {
        if n == 1 {
            1.0
        } else {
            let t = i as f64 / (n - 1) as f64;
            (std::f64::consts::PI * t).sin().powi(2)
        }
    };
    ScalarField::from_fn(grid, |x, y, z| w(x, dims[0]) * w(y, dims[1]) * w(z, dims[2]))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TruthConfig {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    /// Largest ‖V‖ over the domain, mm/s.
    pub v_peak: f64,
    /// Diffusivity range, mm²/s.
    pub d_min: f64,
    pub d_max: f64,
    /// Wavelength band of the potentials and of D, mm.
    pub field_wavelength: [f64; 2],
    /// Wavelength band of the initial texture, mm.
    pub texture_wavelength: [f64; 2],
    /// Initial concentration is `c0_mean + c0_texture · texture`, with the
    /// texture scaled to unit peak.
    pub c0_mean: f64,
    pub c0_texture: f64,
    pub modes: usize,
    pub seed: u64,
}

impl Default for TruthConfig {
    fn default() -> Self {
        Self {
            dims: [32, 32, 32],
            spacing_mm: [1.2, 1.2, 1.3],
            v_peak: 2.0,
            d_min: 0.04,
            d_max: 0.2,
            field_wavelength: [15.0, 25.0],
            texture_wavelength: [6.0, 12.0],
            c0_mean: 2.0,
            c0_texture: 1.0,
            modes: 6,
            seed: 1,
        }
    }
}

/// Known fields and initial state for a synthetic run.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub mask: DomainMask,
    pub potentials: Potentials,
    pub v: VectorField,
    pub d: ScalarField,
    pub c0: ScalarField,
}

impl GroundTruth {
    pub fn grid(&self) -> &Grid3 {
        self.mask.grid()
    }
}

pub fn ground_truth(cfg: &TruthConfig) -> Result<GroundTruth> {
    if !(cfg.v_peak >= 0.0 && cfg.d_min >= 0.0 && cfg.d_max >= cfg.d_min && cfg.c0_texture >= 0.0) {
        return Err(Error::Parameter("ground-truth ranges must be ordered and non-negative".into()));
    }
    let grid = Grid3::new(cfg.dims, cfg.spacing_mm)?;
    let mask = DomainMask::full(grid);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let [wl_lo, wl_hi] = cfg.field_wavelength;
    let g1 = random_smooth_field(grid, &mut rng, cfg.modes, wl_lo, wl_hi);
    let g2 = random_smooth_field(grid, &mut rng, cfg.modes, wl_lo, wl_hi);
    let raw = velocity_from_potentials(&Potentials::new(g1.clone(), g2.clone())?)?;
    let peak = raw.magnitude().max();
    // V is bilinear in the potentials (linear on planar grids)
    let s = if peak > 0.0 {
        if grid.is_planar() {
            cfg.v_peak / peak
        } else {
            (cfg.v_peak / peak).sqrt()
        }
    } else {
        0.0
    };
    let potentials = Potentials::new(g1.scaled(s), g2.scaled(if grid.is_planar() { 1.0 } else { s }))?;
    let v = velocity_from_potentials(&potentials)?;
    let dshape = random_smooth_field(grid, &mut rng, cfg.modes, wl_lo, wl_hi);
    let (lo, hi) = (dshape.min(), dshape.max());
    let d = dshape.map(|x| {
        let t = if hi > lo { (x - lo) / (hi - lo) } else { 0.5 };
        cfg.d_min + (cfg.d_max - cfg.d_min) * t
    });
    let [tl, th] = cfg.texture_wavelength;
    let tex = random_smooth_field(grid, &mut rng, 4 * cfg.modes, tl, th);
    let c0 = tex.map(|x| cfg.c0_mean + cfg.c0_texture * x);
    Ok(GroundTruth {
        mask,
        potentials,
        v,
        d,
        c0,
    })
}
