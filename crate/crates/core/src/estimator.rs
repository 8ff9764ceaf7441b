//! Stochastic fitting of velocity and diffusivity fields to a measured
//! concentration series.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{DomainMask, Grid3, ScalarField, VectorField};
use crate::loss::{LossBreakdown, LossConfig, Objective, ParamGradients, Params, TrainingSample};
use crate::params::{diffusivity_iso, velocity_from_potentials, DiffusivityParamIso, Potentials};
use crate::series::VolumeSeries;
use crate::solver::{
    cfl_check, effective, integrate, BoundaryData, DirichletInterp, FaceDiffusivity, Integrator, SolverConfig,
    TransportMode,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    pub lambda_v: f64,
    pub lambda_d: f64,
    pub sigma: f64,
    pub dt: f64,
    /// Sample length in frame intervals; `None` uses `⌊T/3⌋`.
    pub t_pd: Option<usize>,
    pub lr: f64,
    pub momentum: f64,
    pub init_scale: f64,
    pub conv_rel_tol: f64,
    pub conv_patience: usize,
    pub max_iters: usize,
    pub rng_seed: u64,
    pub mode: TransportMode,
    pub integrator: Integrator,
    pub cfl_safety: f64,
    /// See [`LossConfig::max_substeps`].
    pub max_substeps: usize,
    pub face: FaceDiffusivity,
    pub dirichlet_interp: DirichletInterp,
    pub hist_bins: usize,
    pub k_quantile: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            lambda_v: 0.1,
            lambda_d: 0.1,
            sigma: 0.6,
            dt: 0.02,
            t_pd: None,
            lr: 1e-3,
            momentum: 0.9,
            init_scale: 0.001,
            conv_rel_tol: 0.001,
            conv_patience: 10,
            max_iters: 2000,
            rng_seed: 0,
            mode: TransportMode::AdvectionDiffusion,
            integrator: Integrator::Rk45FixedStep,
            cfl_safety: 0.8,
            max_substeps: 1,
            face: FaceDiffusivity::Mean,
            dirichlet_interp: DirichletInterp::Linear,
            hist_bins: 256,
            k_quantile: 0.9,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("sigma", self.sigma),
            ("dt", self.dt),
            ("init_scale", self.init_scale),
            ("conv_rel_tol", self.conv_rel_tol),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Parameter(format!("{name} must be positive, got {v}")));
            }
        }
        let nonneg = [
            ("lambda_v", self.lambda_v),
            ("lambda_d", self.lambda_d),
            ("lr", self.lr),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Parameter(format!("{name} must be non-negative, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Parameter(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.conv_patience == 0 || self.max_substeps == 0 {
            return Err(Error::Parameter("conv_patience and max_substeps must be at least 1".into()));
        }
        if self.t_pd == Some(0) {
            return Err(Error::Parameter("t_pd must be at least 1".into()));
        }
        if self.hist_bins == 0 || !(self.k_quantile > 0.0 && self.k_quantile <= 1.0) {
            return Err(Error::Parameter("invalid edge-threshold histogram settings".into()));
        }
        self.solver().validate()
    }

    pub fn solver(&self) -> SolverConfig {
        SolverConfig {
            dt: self.dt,
            cfl_safety: self.cfl_safety,
            mode: self.mode,
            integrator: self.integrator,
            face: self.face,
            dirichlet_interp: self.dirichlet_interp,
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            lambda_v: self.lambda_v,
            lambda_d: self.lambda_d,
            sigma: self.sigma,
            hist_bins: self.hist_bins,
            k_quantile: self.k_quantile,
            solver: self.solver(),
            max_substeps: self.max_substeps,
        }
    }

    /// Sample length for a series with last frame index `t`.
    pub fn sample_length(&self, t: usize) -> Result<usize> {
        let t_pd = self.t_pd.unwrap_or(t / 3);
        if t_pd == 0 || t_pd > t {
            return Err(Error::Parameter(format!(
                "sample length {t_pd} does not fit a series with {} frames",
                t + 1
            )));
        }
        Ok(t_pd)
    }
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub potentials: Potentials,
    pub diffus_param: DiffusivityParamIso,
    pub v: VectorField,
    pub d: ScalarField,
    pub loss_history: Vec<LossBreakdown>,
    pub sample_starts: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
}

impl FitResult {
    pub fn params(&self) -> Params {
        Params {
            potentials: self.potentials.clone(),
            diffusivity: self.diffus_param.clone(),
        }
    }
}

/// In-mask values drawn i.i.d. from `scale · N(0, 1)`; zero outside.
pub fn init_params(
    grid: Grid3,
    mask: &DomainMask,
    seed: u64,
    scale: f64,
) -> Result<(Potentials, DiffusivityParamIso)> {
    grid.ensure_same(mask.grid(), "mask")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || {
        let data: Vec<f64> = (0..grid.len())
            .map(|i| {
                let r: f64 = rng.sample(StandardNormal);
                if mask.is_inside(i) {
                    scale * r
                } else {
                    0.0
                }
            })
            .collect();
        ScalarField::new(grid, data)
    };
    let gamma1 = draw()?;
    let gamma2 = draw()?;
    let l = draw()?;
    Ok((Potentials::new(gamma1, gamma2)?, DiffusivityParamIso { l }))
}

/// Window of `t_pd + 1` frames at a uniformly drawn start.
pub fn select_sample<R: Rng + ?Sized>(
    series: &VolumeSeries,
    t_pd: usize,
    rng: &mut R,
) -> Result<TrainingSample> {
    if t_pd == 0 || series.len() < t_pd + 1 {
        return Err(Error::Parameter(format!(
            "cannot draw a {}-frame sample from {} frames",
            t_pd + 1,
            series.len()
        )));
    }
    let start = rng.gen_range(0..=series.last_index() - t_pd);
    Ok(TrainingSample {
        start,
        series: series.window(start, t_pd)?,
    })
}

/// Per-iteration progress hook.
pub trait FitObserver {
    fn iteration(&mut self, iteration: usize, loss: &LossBreakdown, params: &Params, grads: &ParamGradients);
}

impl FitObserver for () {
    fn iteration(&mut self, _: usize, _: &LossBreakdown, _: &Params, _: &ParamGradients) {}
}

pub fn fit(series: &VolumeSeries, mask: &DomainMask, cfg: &EstimatorConfig) -> Result<FitResult> {
    fit_observed(series, mask, cfg, &mut ())
}

/// Momentum SGD over random windows until the sampled loss settles.
pub fn fit_observed(
    series: &VolumeSeries,
    mask: &DomainMask,
    cfg: &EstimatorConfig,
    observer: &mut dyn FitObserver,
) -> Result<FitResult> {
    cfg.validate()?;
    let grid = *series.grid();
    grid.ensure_same(mask.grid(), "mask")?;
    let t_pd = cfg.sample_length(series.last_index())?;
    let (potentials, diffus) = init_params(grid, mask, cfg.rng_seed, cfg.init_scale)?;
    let mut params = Params {
        potentials,
        diffusivity: diffus,
    };
    let objective = Objective::new(mask, cfg.loss())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    rng.set_stream(1);

    let n = grid.len();
    let mut velocity = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let mut history = Vec::new();
    let mut starts = Vec::new();
    let mut streak = 0;
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..cfg.max_iters {
        let sample = select_sample(series, t_pd, &mut rng)?;
        starts.push(sample.start);
        let (eval, grads) = objective
            .gradients(&sample, &params)
            .map_err(|e| diverged(it, e))?;
        if !eval.loss.total.is_finite() {
            return Err(diverged(it, Error::NonFinite("loss".into())));
        }
        observer.iteration(it, &eval.loss, &params, &grads);
        iterations = it + 1;
        if let Some(prev) = history.last().map(|l: &LossBreakdown| l.total) {
            let change = (eval.loss.total - prev).abs();
            let rel = if prev > 0.0 { change / prev } else if change == 0.0 { 0.0 } else { f64::INFINITY };
            streak = if rel < cfg.conv_rel_tol { streak + 1 } else { 0 };
        }
        history.push(eval.loss);
        if streak >= cfg.conv_patience {
            converged = true;
            break;
        }
        let fields = [
            &mut params.potentials.gamma1,
            &mut params.potentials.gamma2,
            &mut params.diffusivity.l,
        ];
        let gs = [&grads.d_gamma1, &grads.d_gamma2, &grads.d_l];
        for ((theta, g), u) in fields.into_iter().zip(gs).zip(velocity.iter_mut()) {
            for (i, ((t, &gi), ui)) in theta
                .as_mut_slice()
                .iter_mut()
                .zip(g.as_slice())
                .zip(u.iter_mut())
                .enumerate()
            {
                if mask.is_inside(i) {
                    *ui = cfg.momentum * *ui + gi;
                    *t -= cfg.lr * *ui;
                }
            }
        }
    }
    let v = velocity_from_potentials(&params.potentials)?;
    let d = diffusivity_iso(&params.diffusivity);
    Ok(FitResult {
        potentials: params.potentials,
        diffus_param: params.diffusivity,
        v,
        d,
        loss_history: history,
        sample_starts: starts,
        iterations,
        converged,
    })
}

fn diverged(iteration: usize, e: Error) -> Error {
    if e.is_numerical() {
        Error::FitDiverged {
            iteration,
            source: Box::new(e),
        }
    } else {
        e
    }
}

/// Integrates the fitted model from `c0`, recording `frames` frames (the
/// first is `c0`) at the boundary data's frame interval.
pub fn predict_series(
    fit: &FitResult,
    c0: &ScalarField,
    mask: &DomainMask,
    bd: &BoundaryData,
    cfg: &EstimatorConfig,
    frames: usize,
) -> Result<VolumeSeries> {
    if frames < 1 {
        return Err(Error::Parameter("prediction needs at least one frame".into()));
    }
    let dt_frames = bd.dt_frames();
    let mut solver = cfg.solver();
    let (ve, de) = effective(solver.mode, &fit.v, &fit.d);
    let cfl = cfl_check(ve, de, mask.grid(), solver.dt, solver.cfl_safety);
    if !cfl.ok {
        // same allowance as during the fit; beyond it the guard below refuses
        let sub = (solver.dt / cfl.max_stable_dt).ceil();
        if sub <= cfg.max_substeps as f64 {
            solver.dt /= sub;
        }
    }
    integrate(c0, &fit.v, &fit.d, mask, bd, &solver, (frames - 1) as f64 * dt_frames, dt_frames)
}

/// Serializable record of one fit.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: EstimatorConfig,
    pub seed: u64,
    pub t_pd: usize,
    pub iterations: usize,
    pub converged: bool,
    pub loss_history: Vec<LossBreakdown>,
    pub sample_starts: Vec<usize>,
}

impl RunManifest {
    pub fn new(cfg: &EstimatorConfig, t_pd: usize, fit: &FitResult) -> Self {
        Self {
            config: *cfg,
            seed: cfg.rng_seed,
            t_pd,
            iterations: fit.iterations,
            converged: fit.converged,
            loss_history: fit.loss_history.clone(),
            sample_starts: fit.sample_starts.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> Grid3 {
        Grid3::new([6, 5, 4], [1.0; 3]).unwrap()
    }

    #[test]
    fn init_is_seeded_and_masked() {
        let g = grid();
        let mut inside = vec![true; g.len()];
        inside[3] = false;
        let mask = DomainMask::new(g, inside, false).unwrap();
        let a = init_params(g, &mask, 7, 0.001).unwrap();
        let b = init_params(g, &mask, 7, 0.001).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0.gamma1.as_slice()[3], 0.0);
        assert_eq!(a.1.l.as_slice()[3], 0.0);
        assert_ne!(a.0.gamma1, init_params(g, &mask, 8, 0.001).unwrap().0.gamma1);
    }

    #[test]
    fn init_scale_statistics() {
        let g = Grid3::new([100, 100, 100], [1.0; 3]).unwrap();
        let mask = DomainMask::full(g);
        let (p, _) = init_params(g, &mask, 1, 0.001).unwrap();
        let x = p.gamma1.as_slice();
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((sd / 0.001 - 1.0).abs() < 0.01, "sd {sd}");
    }

    fn series(frames: usize) -> VolumeSeries {
        let g = grid();
        VolumeSeries::new(
            1.0,
            (0..frames).map(|f| ScalarField::constant(g, f as f64)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn sample_windows() {
        let s = series(5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let w = select_sample(&s, 4, &mut rng).unwrap();
            assert_eq!(w.start, 0);
            assert_eq!(w.series.len(), 5);
        }
        assert!(select_sample(&s, 5, &mut rng).is_err());
        let w = select_sample(&s, 2, &mut rng).unwrap();
        assert_eq!(w.series.frames()[0].as_slice()[0], w.start as f64);
    }

    #[test]
    fn sample_starts_are_uniform() {
        let s = series(11);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut counts = [0usize; 8];
        let draws = 10_000;
        for _ in 0..draws {
            counts[select_sample(&s, 3, &mut rng).unwrap().start] += 1;
        }
        let e = draws as f64 / 8.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        // 7 degrees of freedom, 0.999 quantile
        assert!(chi2 < 24.32, "chi2 {chi2}");
    }

    #[test]
    fn default_sample_length() {
        let cfg = EstimatorConfig::default();
        assert_eq!(cfg.sample_length(40).unwrap(), 13);
        assert!(cfg.sample_length(2).is_err());
        let cfg = EstimatorConfig { t_pd: Some(2), ..cfg };
        assert_eq!(cfg.sample_length(2).unwrap(), 2);
    }

    #[test]
    fn config_validation() {
        let base = EstimatorConfig::default();
        assert!(base.validate().is_ok());
        for bad in [
            EstimatorConfig { conv_patience: 0, ..base },
            EstimatorConfig { momentum: 1.0, ..base },
            EstimatorConfig { dt: 0.0, ..base },
            EstimatorConfig { t_pd: Some(0), ..base },
            EstimatorConfig { lr: -1.0, ..base },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let g = grid();
        let mask = DomainMask::full(g);
        let s = series(4);
        let cfg = EstimatorConfig {
            lr: 0.0,
            t_pd: Some(3),
            dt: 0.1,
            max_iters: 50,
            ..EstimatorConfig::default()
        };
        let fit = fit(&s, &mask, &cfg).unwrap();
        let (p, l) = init_params(g, &mask, cfg.rng_seed, cfg.init_scale).unwrap();
        assert_eq!(fit.potentials, p);
        assert_eq!(fit.diffus_param, l);
        assert!(fit.converged);
        assert_eq!(fit.iterations, cfg.conv_patience + 1);
    }
}
