//! Estimation objective and its exact gradient.
//!
//! The objective is the collocation loss between predicted and measured
//! frames plus edge-aware smoothness penalties on V and D:
//!
//! ```text
//! L = L_cc + λ_V Σ_ax mean(α_V ‖∇V^ax‖²) + λ_D mean(α_D ‖∇D‖²)
//! ```
//!
//! The weights `α = exp(−‖∇(K_σ ∗ f)‖² / k)` and the thresholds `k` are
//! recomputed from the current fields at each call and then treated as
//! constants, so no gradient flows through them.
//!
//! Gradients are obtained by a reverse sweep through every Runge-Kutta
//! stage of the unrolled forward integration, followed by the chain rule
//! through the operator assembly and the field parameterization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{gaussian_smooth, DomainMask, ScalarField, VectorField};
use crate::params::{
    central, diffusivity_iso, velocity_from_potentials, velocity_from_potentials_adjoint,
    DiffusivityParamIso, Potentials,
};
use crate::series::VolumeSeries;
use crate::solver::{
    cfl_check, effective, BoundaryData, Engine, SolverConfig, Stencil, TransportOperator,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cc: f64,
    pub l_as_v: f64,
    pub l_as_d: f64,
    pub total: f64,
    pub lambda_v: f64,
    pub lambda_d: f64,
}

impl LossBreakdown {
    fn assemble(l_cc: f64, l_as_v: f64, l_as_d: f64, lambda_v: f64, lambda_d: f64) -> Self {
        Self {
            l_cc,
            l_as_v,
            l_as_d,
            total: l_cc + lambda_v * l_as_v + lambda_d * l_as_d,
            lambda_v,
            lambda_d,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGradients {
    pub d_gamma1: ScalarField,
    pub d_gamma2: ScalarField,
    pub d_l: ScalarField,
}

impl ParamGradients {
    /// Euclidean norm over all three fields.
    pub fn norm(&self) -> f64 {
        [&self.d_gamma1, &self.d_gamma2, &self.d_l]
            .iter()
            .flat_map(|f| f.as_slice())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Free optimization variables.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub potentials: Potentials,
    pub diffusivity: DiffusivityParamIso,
}

impl Params {
    pub fn velocity(&self) -> Result<VectorField> {
        velocity_from_potentials(&self.potentials)
    }

    pub fn diffusivity(&self) -> ScalarField {
        diffusivity_iso(&self.diffusivity)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda_v: f64,
    pub lambda_d: f64,
    /// Gaussian pre-smoothing width for the edge weights, in voxels.
    pub sigma: f64,
    pub hist_bins: usize,
    /// Cumulative histogram mass that defines the edge threshold `k`.
    pub k_quantile: f64,
    pub solver: SolverConfig,
    /// Largest factor by which a sample's step may be subdivided when the
    /// current fields violate the stability bound at `solver.dt`; 1 keeps
    /// the guard strict.
    pub max_substeps: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_v: 0.1,
            lambda_d: 0.1,
            sigma: 0.6,
            hist_bins: 256,
            k_quantile: 0.9,
            solver: SolverConfig::default(),
            max_substeps: 1,
        }
    }
}

/// Mean over frames `1..` of the in-mask mean squared difference.
pub fn loss_cc(
    predicted: &VolumeSeries,
    measured: &VolumeSeries,
    mask: &DomainMask,
) -> Result<f64> {
    if predicted.len() != measured.len() {
        return Err(Error::Parameter(format!(
            "frame count mismatch: predicted {} vs measured {}",
            predicted.len(),
            measured.len()
        )));
    }
    if predicted.len() < 2 {
        return Err(Error::Parameter("collocation loss needs at least two frames".into()));
    }
    predicted.grid().ensure_same(measured.grid(), "collocation loss")?;
    predicted.grid().ensure_same(mask.grid(), "collocation mask")?;
    let frames: Vec<&[f64]> = predicted.frames()[1..].iter().map(|f| f.as_slice()).collect();
    Ok(collocation(&frames, &measured.frames()[1..], mask))
}

fn collocation(predicted: &[&[f64]], measured: &[ScalarField], mask: &DomainMask) -> f64 {
    let n = mask.count_inside().max(1) as f64;
    let per_frame: f64 = predicted
        .iter()
        .zip(measured)
        .map(|(p, m)| {
            p.iter()
                .zip(m.as_slice())
                .zip(mask.inside())
                .filter(|(_, &ins)| ins)
                .map(|((a, b), _)| (a - b) * (a - b))
                .sum::<f64>()
                / n
        })
        .sum();
    per_frame / predicted.len() as f64
}

/// Edge threshold from the histogram of in-mask gradient magnitudes.
///
/// Builds `bins` equal bins over `[0, max |∇f|]` and returns the upper edge
/// of the first bin at which the cumulative mass reaches `quantile`.
/// Returns `f64::EPSILON` when every gradient vanishes.
pub fn pm_k(f: &ScalarField, mask: &DomainMask, bins: usize) -> f64 {
    pm_k_pooled(&[f], mask, bins, 0.9)
}

/// [`pm_k`] over the gradient magnitudes of several fields at once.
pub fn pm_k_pooled(fields: &[&ScalarField], mask: &DomainMask, bins: usize, quantile: f64) -> f64 {
    let mut mags = Vec::new();
    for f in fields {
        let g = [central(f, 0), central(f, 1), central(f, 2)];
        for idx in 0..f.grid().len() {
            if mask.is_inside(idx) {
                let s: f64 = g.iter().map(|c| c.as_slice()[idx].powi(2)).sum();
                mags.push(s.sqrt());
            }
        }
    }
    histogram_quantile(&mags, bins, quantile)
}

pub(crate) fn histogram_quantile(values: &[f64], bins: usize, quantile: f64) -> f64 {
    let bins = bins.max(1);
    let max = values.iter().copied().fold(0.0, f64::max);
    if values.is_empty() || max <= 0.0 {
        return f64::EPSILON;
    }
    let width = max / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in values {
        let b = ((v / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let target = quantile * values.len() as f64;
    let mut cum = 0usize;
    for (b, c) in counts.iter().enumerate() {
        cum += c;
        if cum as f64 >= target {
            return if b + 1 == bins { max } else { (b + 1) as f64 * width };
        }
    }
    max
}

/// Lagged edge weights for one iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct SmoothnessCoefficients {
    pub alpha_v: ScalarField,
    pub alpha_d: ScalarField,
    pub k_v: f64,
    pub k_d: f64,
}

fn sq_grad_norm(f: &ScalarField) -> Vec<f64> {
    let g = [central(f, 0), central(f, 1), central(f, 2)];
    (0..f.grid().len())
        .map(|i| g.iter().map(|c| c.as_slice()[i].powi(2)).sum())
        .collect()
}

/// Edge weights for given thresholds.
pub fn edge_weights(
    v: &VectorField,
    d: &ScalarField,
    sigma: f64,
    k_v: f64,
    k_d: f64,
) -> Result<(ScalarField, ScalarField)> {
    let grid = *d.grid();
    let mut alpha_v = vec![0.0; grid.len()];
    for c in v.components() {
        let s = sq_grad_norm(&gaussian_smooth(c, sigma)?);
        for (a, si) in alpha_v.iter_mut().zip(s) {
            *a += (-si / k_v).exp() / 3.0;
        }
    }
    let alpha_d = sq_grad_norm(&gaussian_smooth(d, sigma)?)
        .into_iter()
        .map(|s| (-s / k_d).exp())
        .collect();
    Ok((ScalarField::new(grid, alpha_v)?, ScalarField::new(grid, alpha_d)?))
}

/// Thresholds from the current fields, then the edge weights.
pub fn smoothness_coefficients(
    v: &VectorField,
    d: &ScalarField,
    mask: &DomainMask,
    cfg: &LossConfig,
) -> Result<SmoothnessCoefficients> {
    let sv: Vec<ScalarField> = v
        .components()
        .iter()
        .map(|c| gaussian_smooth(c, cfg.sigma))
        .collect::<Result<_>>()?;
    let sd = gaussian_smooth(d, cfg.sigma)?;
    let k_v = pm_k_pooled(&[&sv[0], &sv[1], &sv[2]], mask, cfg.hist_bins, cfg.k_quantile);
    let k_d = pm_k_pooled(&[&sd], mask, cfg.hist_bins, cfg.k_quantile);
    let (alpha_v, alpha_d) = edge_weights(v, d, cfg.sigma, k_v, k_d)?;
    Ok(SmoothnessCoefficients {
        alpha_v,
        alpha_d,
        k_v,
        k_d,
    })
}

/// Weighted H¹ seminorm means `(l_as_v, l_as_d)` for fixed weights.
pub fn smoothness_values(
    v: &VectorField,
    d: &ScalarField,
    coeffs: &SmoothnessCoefficients,
    mask: &DomainMask,
) -> (f64, f64) {
    let weighted = |f: &ScalarField, alpha: &ScalarField| {
        let s = sq_grad_norm(f);
        let w: Vec<f64> = s.iter().zip(alpha.as_slice()).map(|(a, b)| a * b).collect();
        mask.mean(&w)
    };
    let l_v = v
        .components()
        .iter()
        .map(|c| weighted(c, &coeffs.alpha_v))
        .sum();
    (l_v, weighted(d, &coeffs.alpha_d))
}

/// Smoothness penalties and their edge weights for explicit thresholds.
pub fn smoothness_terms(
    v: &VectorField,
    d: &ScalarField,
    sigma: f64,
    k_v: f64,
    k_d: f64,
    mask: &DomainMask,
) -> Result<(f64, f64, ScalarField, ScalarField)> {
    let (alpha_v, alpha_d) = edge_weights(v, d, sigma, k_v, k_d)?;
    let coeffs = SmoothnessCoefficients {
        alpha_v,
        alpha_d,
        k_v,
        k_d,
    };
    let (lv, ld) = smoothness_values(v, d, &coeffs, mask);
    Ok((lv, ld, coeffs.alpha_v, coeffs.alpha_d))
}

/// Accumulates `∂/∂f mean_mask(α ‖∇f‖²)` into `acc`.
fn smoothness_grad_into(f: &ScalarField, alpha: &ScalarField, mask: &DomainMask, scale: f64, acc: &mut [f64]) {
    let n = mask.count_inside().max(1) as f64;
    let grid = *f.grid();
    for axis in 0..3 {
        let g = central(f, axis);
        let bar: Vec<f64> = (0..grid.len())
            .map(|i| {
                if mask.is_inside(i) {
                    scale * 2.0 * alpha.as_slice()[i] * g.as_slice()[i] / n
                } else {
                    0.0
                }
            })
            .collect();
        let bar = ScalarField::new(grid, bar).expect("grid length");
        crate::grid::axis_derivative_adjoint_into(&bar, axis, crate::grid::DiffScheme::Central, acc);
    }
}

/// A training window: frame 0 is the initial condition.
#[derive(Clone, Debug)]
pub struct TrainingSample {
    pub start: usize,
    pub series: VolumeSeries,
}

/// Objective bound to one domain; caches the stencil structure.
pub struct Objective<'m> {
    mask: &'m DomainMask,
    stencil: Stencil,
    cfg: LossConfig,
}

/// Everything computed by one evaluation.
pub struct Evaluation {
    pub loss: LossBreakdown,
    pub coefficients: SmoothnessCoefficients,
    pub predicted: Vec<ScalarField>,
}

impl<'m> Objective<'m> {
    pub fn new(mask: &'m DomainMask, cfg: LossConfig) -> Result<Self> {
        cfg.solver.validate()?;
        Ok(Self {
            mask,
            stencil: Stencil::new(mask),
            cfg,
        })
    }

    pub fn config(&self) -> &LossConfig {
        &self.cfg
    }

    fn model_fields(&self, params: &Params) -> Result<(VectorField, ScalarField)> {
        let grid = *self.mask.grid();
        let v = if self.cfg.solver.mode.has_advection() {
            params.velocity()?
        } else {
            VectorField::zeros(grid)
        };
        let d = if self.cfg.solver.mode.has_diffusion() {
            params.diffusivity()
        } else {
            ScalarField::zeros(grid)
        };
        Ok((v, d))
    }

    /// Edge weights from the current parameters.
    pub fn coefficients(&self, params: &Params) -> Result<SmoothnessCoefficients> {
        let (v, d) = self.model_fields(params)?;
        smoothness_coefficients(&v, &d, self.mask, &self.cfg)
    }

    fn steps_per_frame(&self, sample: &TrainingSample) -> Result<usize> {
        let dt = self.cfg.solver.dt;
        let spf = (sample.series.dt_frames() / dt).round();
        if spf < 1.0 || (spf * dt - sample.series.dt_frames()).abs() > 1e-9 * dt.max(1.0) {
            return Err(Error::Parameter(format!(
                "frame interval {} s is not a multiple of dt = {dt} s",
                sample.series.dt_frames()
            )));
        }
        Ok(spf as usize)
    }

    fn check_sample(&self, sample: &TrainingSample, params: &Params) -> Result<()> {
        let grid = self.mask.grid();
        grid.ensure_same(sample.series.grid(), "sample")?;
        grid.ensure_same(params.potentials.grid(), "potentials")?;
        grid.ensure_same(params.diffusivity.l.grid(), "diffusivity parameter")?;
        if sample.series.len() < 2 {
            return Err(Error::Parameter("a training sample needs at least two frames".into()));
        }
        Ok(())
    }

    /// Loss value with the given lagged coefficients.
    pub fn evaluate_with(
        &self,
        sample: &TrainingSample,
        params: &Params,
        coeffs: &SmoothnessCoefficients,
    ) -> Result<Evaluation> {
        self.run(sample, params, coeffs, false).map(|(e, _)| e)
    }

    pub fn evaluate(&self, sample: &TrainingSample, params: &Params) -> Result<Evaluation> {
        let coeffs = self.coefficients(params)?;
        self.evaluate_with(sample, params, &coeffs)
    }

    /// Loss and gradients with freshly computed (then frozen) coefficients.
    pub fn gradients(
        &self,
        sample: &TrainingSample,
        params: &Params,
    ) -> Result<(Evaluation, ParamGradients)> {
        let coeffs = self.coefficients(params)?;
        self.gradients_with(sample, params, &coeffs)
    }

    pub fn gradients_with(
        &self,
        sample: &TrainingSample,
        params: &Params,
        coeffs: &SmoothnessCoefficients,
    ) -> Result<(Evaluation, ParamGradients)> {
        let (e, g) = self.run(sample, params, coeffs, true)?;
        Ok((e, g.expect("gradients requested")))
    }

    fn run(
        &self,
        sample: &TrainingSample,
        params: &Params,
        coeffs: &SmoothnessCoefficients,
        want_grad: bool,
    ) -> Result<(Evaluation, Option<ParamGradients>)> {
        self.check_sample(sample, params)?;
        let grid = *self.mask.grid();
        let solver = &self.cfg.solver;
        let spf = self.steps_per_frame(sample)?;
        let (v, d) = self.model_fields(params)?;
        let (ve, de) = effective(solver.mode, &v, &d);
        let cfl = cfl_check(ve, de, &grid, solver.dt, solver.cfl_safety);
        let sub = if cfl.ok {
            1
        } else {
            (solver.dt / cfl.max_stable_dt).ceil() as usize
        };
        if sub > self.cfg.max_substeps.max(1) {
            return Err(Error::Cfl {
                dt: solver.dt,
                max_stable_dt: cfl.max_stable_dt,
            });
        }
        let spf = spf * sub;
        let op = TransportOperator::assemble(&self.stencil, ve, de, solver.face)?;
        let bd = BoundaryData::from_series(&sample.series, solver.dirichlet_interp);
        let engine = Engine {
            op: &op,
            bd: &bd,
            integrator: solver.integrator,
            dt: solver.dt / sub as f64,
            t0: 0.0,
        };
        let frames = sample.series.len() - 1;
        let traj = engine.run(sample.series.frames()[0].as_slice(), frames, spf, want_grad);
        if traj.frames.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("predicted concentration".into()));
        }
        let measured = &sample.series.frames()[1..];
        let predicted_refs: Vec<&[f64]> = traj.frames[1..].iter().map(|f| f.as_slice()).collect();
        let l_cc = collocation(&predicted_refs, measured, self.mask);
        let (mut l_v, mut l_d) = smoothness_values(&v, &d, coeffs, self.mask);
        if !solver.mode.has_advection() {
            l_v = 0.0;
        }
        if !solver.mode.has_diffusion() {
            l_d = 0.0;
        }
        let loss = LossBreakdown::assemble(l_cc, l_v, l_d, self.cfg.lambda_v, self.cfg.lambda_d);

        let grads = if want_grad {
            let n_in = self.mask.count_inside().max(1) as f64;
            let scale = 2.0 / (frames as f64 * n_in);
            let frame_bars: Vec<Vec<f64>> = traj.frames[1..]
                .iter()
                .zip(measured)
                .map(|(p, m)| {
                    p.iter()
                        .zip(m.as_slice())
                        .zip(self.mask.inside())
                        .map(|((a, b), &ins)| if ins { scale * (a - b) } else { 0.0 })
                        .collect()
                })
                .collect();
            let bar = engine.reverse(&traj, &frame_bars);
            let (v_bar, d_bar) = op.pullback(ve, de, solver.face, &bar);
            Some(self.pull_to_params(params, &v, &d, coeffs, v_bar, d_bar))
        } else {
            None
        };

        let predicted = traj
            .frames
            .into_iter()
            .map(|f| ScalarField::new(grid, f))
            .collect::<Result<Vec<_>>>()?;
        Ok((
            Evaluation {
                loss,
                coefficients: coeffs.clone(),
                predicted,
            },
            grads,
        ))
    }

    fn pull_to_params(
        &self,
        params: &Params,
        v: &VectorField,
        d: &ScalarField,
        coeffs: &SmoothnessCoefficients,
        v_bar: Option<VectorField>,
        d_bar: Option<ScalarField>,
    ) -> ParamGradients {
        let grid = *self.mask.grid();
        let mode = self.cfg.solver.mode;
        let (d_gamma1, d_gamma2) = if mode.has_advection() {
            let mut vb = v_bar.unwrap_or_else(|| VectorField::zeros(grid));
            for axis in 0..3 {
                let comp = match axis {
                    0 => &mut vb.x,
                    1 => &mut vb.y,
                    _ => &mut vb.z,
                };
                smoothness_grad_into(
                    v.component(axis),
                    &coeffs.alpha_v,
                    self.mask,
                    self.cfg.lambda_v,
                    comp.as_mut_slice(),
                );
            }
            velocity_from_potentials_adjoint(&params.potentials, &vb)
        } else {
            (ScalarField::zeros(grid), ScalarField::zeros(grid))
        };
        let d_l = if mode.has_diffusion() {
            let mut db = d_bar.unwrap_or_else(|| ScalarField::zeros(grid));
            smoothness_grad_into(d, &coeffs.alpha_d, self.mask, self.cfg.lambda_d, db.as_mut_slice());
            let l = params.diffusivity.l.as_slice();
            let data = db.as_slice().iter().zip(l).map(|(g, l)| 2.0 * l * g).collect();
            ScalarField::new(grid, data).expect("grid length")
        } else {
            ScalarField::zeros(grid)
        };
        let mut g = ParamGradients {
            d_gamma1,
            d_gamma2,
            d_l,
        };
        for f in [&mut g.d_gamma1, &mut g.d_gamma2, &mut g.d_l] {
            self.mask.apply(f);
        }
        g
    }
}

/// Runs the forward model over the sample and assembles all loss terms.
pub fn total_loss(
    sample: &TrainingSample,
    params: &Params,
    mask: &DomainMask,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    Ok(Objective::new(mask, *cfg)?.evaluate(sample, params)?.loss)
}

/// Loss and exact gradients with respect to `(Γ₁, Γ₂, L)`.
pub fn loss_gradients(
    sample: &TrainingSample,
    params: &Params,
    mask: &DomainMask,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, ParamGradients)> {
    let (e, g) = Objective::new(mask, *cfg)?.gradients(sample, params)?;
    Ok((e.loss, g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid3;

    fn series(frames: Vec<ScalarField>) -> VolumeSeries {
        VolumeSeries::new(1.0, frames).unwrap()
    }

    #[test]
    fn collocation_arithmetic() {
        let g = Grid3::new([3, 2, 1], [1.0; 3]).unwrap();
        let mask = DomainMask::full(g);
        let c = ScalarField::constant(g, 2.0);
        let m = series(vec![c.clone(), c.clone(), c.clone()]);
        assert_eq!(loss_cc(&m, &m, &mask).unwrap(), 0.0);
        let p1 = series(vec![c.clone(), c.map(|x| x + 1.0)]);
        let m1 = series(vec![c.clone(), c.clone()]);
        assert_eq!(loss_cc(&p1, &m1, &mask).unwrap(), 1.0);
        let p2 = series(vec![c.clone(), c.map(|x| x + 1.0), c.map(|x| x + 3.0)]);
        assert_eq!(loss_cc(&p2, &m, &mask).unwrap(), 5.0);
        assert!(loss_cc(&p2, &m1, &mask).is_err());
        assert!(loss_cc(&series(vec![c.clone()]), &series(vec![c]), &mask).is_err());
    }

    #[test]
    fn pm_k_special_cases() {
        let g = Grid3::new([6, 6, 6], [1.0; 3]).unwrap();
        let mask = DomainMask::full(g);
        assert_eq!(pm_k(&ScalarField::constant(g, 3.0), &mask, 256), f64::EPSILON);
        // linear ramp: every central/one-sided gradient equals the slope
        let f = ScalarField::from_fn(g, |x, _, _| 0.7 * x as f64);
        assert!((pm_k(&f, &mask, 256) - 0.7).abs() < 1e-12);
    }

    #[test]
    fn histogram_quantile_matches_sorted_quantile() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let vals: Vec<f64> = (0..1000).map(|_| rng.gen::<f64>() * 5.0).collect();
        let k = histogram_quantile(&vals, 256, 0.9);
        let mut sorted = vals.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let q = sorted[(0.9 * 1000.0) as usize - 1];
        let width = sorted[999] / 256.0;
        assert!((k - q).abs() <= width, "k {k} q {q} width {width}");
    }

    #[test]
    fn constant_fields_have_unit_weights_and_no_penalty() {
        let g = Grid3::new([6, 5, 4], [1.0; 3]).unwrap();
        let mask = DomainMask::full(g);
        let v = VectorField::constant(g, [1.0, -0.5, 2.0]);
        let d = ScalarField::constant(g, 0.02);
        let (lv, ld, av, ad) = smoothness_terms(&v, &d, 0.6, f64::EPSILON, f64::EPSILON, &mask).unwrap();
        assert_eq!((lv, ld), (0.0, 0.0));
        assert!(av.as_slice().iter().chain(ad.as_slice()).all(|&a| a == 1.0));
    }

    #[test]
    fn infinite_threshold_reduces_to_plain_seminorm() {
        let g = Grid3::new([6, 5, 4], [0.9, 1.1, 1.3]).unwrap();
        let mut inside = vec![true; g.len()];
        inside[0] = false;
        inside[17] = false;
        let mask = DomainMask::new(g, inside.clone(), false).unwrap();
        let f = |s: usize| {
            ScalarField::from_fn(g, move |x, y, z| ((x * 3 + y * 7 + z * 5 + s) % 11) as f64 * 0.1)
        };
        let v = VectorField::new(f(0), f(1), f(2)).unwrap();
        let d = f(3);
        let (lv, ld, _, _) = smoothness_terms(&v, &d, 0.6, f64::INFINITY, f64::INFINITY, &mask).unwrap();
        // direct loop with explicit stencils
        let deriv = |h: &ScalarField, x: usize, y: usize, z: usize, a: usize| -> f64 {
            let dims = g.dims();
            let c = [x, y, z];
            let at = |cc: [usize; 3]| h.get(cc[0], cc[1], cc[2]);
            let mut lo = c;
            let mut hi = c;
            let sp = g.spacing()[a];
            if c[a] == 0 {
                hi[a] += 1;
                (at(hi) - at(lo)) / sp
            } else if c[a] + 1 == dims[a] {
                lo[a] -= 1;
                (at(hi) - at(lo)) / sp
            } else {
                lo[a] -= 1;
                hi[a] += 1;
                (at(hi) - at(lo)) / (2.0 * sp)
            }
        };
        let (mut sv, mut sd, mut n) = (0.0, 0.0, 0.0);
        for z in 0..4 {
            for y in 0..5 {
                for x in 0..6 {
                    if !inside[g.index(x, y, z)] {
                        continue;
                    }
                    n += 1.0;
                    for a in 0..3 {
                        for c in v.components() {
                            sv += deriv(c, x, y, z, a).powi(2);
                        }
                        sd += deriv(&d, x, y, z, a).powi(2);
                    }
                }
            }
        }
        assert!((lv - sv / n).abs() < 1e-12 * sv.max(1.0));
        assert!((ld - sd / n).abs() < 1e-12 * sd.max(1.0));
    }

    #[test]
    fn edge_weight_drops_at_a_step() {
        let g = Grid3::new([16, 4, 4], [1.0; 3]).unwrap();
        let d = ScalarField::from_fn(g, |x, _, _| if x < 8 { 0.0 } else { 1.0 });
        let v = VectorField::zeros(g);
        let mask = DomainMask::full(g);
        let k = pm_k(&gaussian_smooth(&d, 0.6).unwrap(), &mask, 256);
        let (_, _, _, ad) = smoothness_terms(&v, &d, 0.6, 1.0, k, &mask).unwrap();
        assert!(ad.get(7, 1, 1) < ad.get(2, 1, 1));
        assert!(ad.get(8, 1, 1) < ad.get(13, 1, 1));
    }
}
