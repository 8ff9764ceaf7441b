//! Forward solver for the masked advection-diffusion system.
//!
//! The domain carries mixed boundary conditions: Dirichlet slabs take the
//! measured concentration (linearly interpolated between frames), the
//! remaining contour is zero-flux, and voxels outside the mask hold zero.
//! Time stepping is fixed-step explicit Runge-Kutta. The same engine runs
//! the reverse sweep that produces exact gradients of the discrete
//! trajectory.

mod operator;
mod tableau;

use serde::{Deserialize, Serialize};

pub use operator::{
    advect_upwind, diffuse, diffuse_with, CoefficientBar, FaceDiffusivity, Stencil,
    TransportOperator, SLOTS,
};
pub use tableau::Integrator;

use crate::error::{Error, Result};
use crate::grid::{DomainMask, Grid3, ScalarField, VectorField};
use crate::series::VolumeSeries;

/// Which physical terms the model carries.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransportMode {
    #[default]
    AdvectionDiffusion,
    AdvectionOnly,
    DiffusionOnly,
}

impl TransportMode {
    pub fn has_advection(self) -> bool {
        !matches!(self, TransportMode::DiffusionOnly)
    }

    pub fn has_diffusion(self) -> bool {
        !matches!(self, TransportMode::AdvectionOnly)
    }
}

/// How Dirichlet values evolve between measured frames.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum DirichletInterp {
    #[default]
    Linear,
    /// Hold the most recent frame.
    Hold,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Time step in seconds.
    pub dt: f64,
    pub cfl_safety: f64,
    pub mode: TransportMode,
    pub integrator: Integrator,
    pub face: FaceDiffusivity,
    pub dirichlet_interp: DirichletInterp,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            dt: 0.02,
            cfl_safety: 0.8,
            mode: TransportMode::AdvectionDiffusion,
            integrator: Integrator::Rk45FixedStep,
            face: FaceDiffusivity::Mean,
            dirichlet_interp: DirichletInterp::Linear,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Parameter(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.cfl_safety > 0.0 && self.cfl_safety <= 1.0) {
            return Err(Error::Parameter(format!(
                "cfl_safety must lie in (0, 1], got {}",
                self.cfl_safety
            )));
        }
        Ok(())
    }
}

/// Measured concentrations that drive the Dirichlet slabs.
#[derive(Clone, Debug)]
pub struct BoundaryData {
    t0: f64,
    dt_frames: f64,
    frames: Vec<ScalarField>,
    interp: DirichletInterp,
}

impl BoundaryData {
    /// Frames are taken to sit at `t0 + k * dt_frames`.
    pub fn new(
        t0: f64,
        dt_frames: f64,
        frames: Vec<ScalarField>,
        interp: DirichletInterp,
    ) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::Parameter("boundary data needs a frame".into()));
        }
        if !(dt_frames > 0.0) {
            return Err(Error::Parameter("boundary frame interval must be positive".into()));
        }
        Ok(Self {
            t0,
            dt_frames,
            frames,
            interp,
        })
    }

    pub fn from_series(series: &VolumeSeries, interp: DirichletInterp) -> Self {
        Self {
            t0: 0.0,
            dt_frames: series.dt_frames(),
            frames: series.frames().to_vec(),
            interp,
        }
    }

    /// Boundary values frozen at a single field for all times.
    pub fn constant(frame: ScalarField) -> Self {
        Self {
            t0: 0.0,
            dt_frames: 1.0,
            frames: vec![frame],
            interp: DirichletInterp::Hold,
        }
    }

    pub fn dt_frames(&self) -> f64 {
        self.dt_frames
    }

    pub fn t_end(&self) -> f64 {
        self.t0 + self.dt_frames * (self.frames.len() - 1) as f64
    }

    /// Frame index and interpolation weight of the following frame.
    fn locate(&self, t: f64) -> (usize, f64) {
        let last = self.frames.len() - 1;
        let s = (t - self.t0) / self.dt_frames;
        let nearest = s.round();
        if (s - nearest).abs() < 1e-9 {
            return ((nearest.max(0.0) as usize).min(last), 0.0);
        }
        if s <= 0.0 {
            return (0, 0.0);
        }
        let k = s.floor() as usize;
        if k >= last {
            return (last, 0.0);
        }
        match self.interp {
            DirichletInterp::Linear => (k, s - k as f64),
            DirichletInterp::Hold => (k, 0.0),
        }
    }

    pub fn value(&self, idx: usize, t: f64) -> f64 {
        let (k, w) = self.locate(t);
        let a = self.frames[k].as_slice()[idx];
        if w == 0.0 {
            a
        } else {
            (1.0 - w) * a + w * self.frames[k + 1].as_slice()[idx]
        }
    }

    fn write_slab(&self, slab: &[usize], t: f64, state: &mut [f64]) {
        let (k, w) = self.locate(t);
        let a = self.frames[k].as_slice();
        if w == 0.0 {
            for &i in slab {
                state[i] = a[i];
            }
        } else {
            let b = self.frames[k + 1].as_slice();
            for &i in slab {
                state[i] = (1.0 - w) * a[i] + w * b[i];
            }
        }
    }
}

/// Imposes the mixed boundary condition on a rate/state pair at time `t`:
/// Dirichlet voxels take the measured value and have zero rate, outside
/// voxels are zero. Zero-flux on the contour is part of the operator.
pub fn apply_bc(
    rate: &mut ScalarField,
    state: &mut ScalarField,
    mask: &DomainMask,
    bd: &BoundaryData,
    t: f64,
) -> Result<()> {
    rate.grid().ensure_same(mask.grid(), "boundary rate")?;
    state.grid().ensure_same(mask.grid(), "boundary state")?;
    let st = Stencil::new(mask);
    bd.write_slab(st.slab(), t, state.as_mut_slice());
    for &i in st.slab() {
        rate.as_mut_slice()[i] = 0.0;
    }
    for &i in st.outside() {
        rate.as_mut_slice()[i] = 0.0;
        state.as_mut_slice()[i] = 0.0;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CflReport {
    pub ok: bool,
    pub max_stable_dt: f64,
}

/// `dt ≤ safety / max_x [Σᵢ |Vᵢ|/Δᵢ + 2 D Σᵢ 1/Δᵢ²]`, summing over axes
/// with more than one voxel.
pub fn cfl_check(
    v: Option<&VectorField>,
    d: Option<&ScalarField>,
    grid: &Grid3,
    dt: f64,
    safety: f64,
) -> CflReport {
    let dims = grid.dims();
    let spacing = grid.spacing();
    let live: Vec<usize> = (0..3).filter(|&a| dims[a] > 1).collect();
    let inv_h2: f64 = live.iter().map(|&a| 1.0 / (spacing[a] * spacing[a])).sum();
    let mut worst: f64 = 0.0;
    for idx in 0..grid.len() {
        let mut rate = 0.0;
        if let Some(v) = v {
            for &a in &live {
                rate += v.component(a).as_slice()[idx].abs() / spacing[a];
            }
        }
        if let Some(d) = d {
            rate += 2.0 * d.as_slice()[idx].abs() * inv_h2;
        }
        worst = worst.max(rate);
    }
    let max_stable_dt = if worst > 0.0 {
        safety / worst
    } else {
        f64::INFINITY
    };
    CflReport {
        ok: dt <= max_stable_dt,
        max_stable_dt,
    }
}

/// Effective model fields under a transport mode.
pub(crate) fn effective<'a>(
    mode: TransportMode,
    v: &'a VectorField,
    d: &'a ScalarField,
) -> (Option<&'a VectorField>, Option<&'a ScalarField>) {
    (
        mode.has_advection().then_some(v),
        mode.has_diffusion().then_some(d),
    )
}

/// Number of whole steps of length `dt` in `span`.
fn whole_steps(span: f64, dt: f64, what: &str) -> Result<usize> {
    let n = (span / dt).round();
    if n < 0.0 || (n * dt - span).abs() > 1e-9 * span.abs().max(dt) {
        return Err(Error::Parameter(format!(
            "{what} = {span} s is not an integer multiple of dt = {dt} s"
        )));
    }
    Ok(n as usize)
}

/// A forward run prepared for (optionally) differentiating.
pub(crate) struct Trajectory {
    /// State at the start of every step, after boundary conditions.
    pub checkpoints: Vec<Vec<f64>>,
    /// Recorded states, frame 0 first.
    pub frames: Vec<Vec<f64>>,
    pub steps_per_frame: usize,
    pub max_embedded_error: f64,
}

/// `out = base + dt Σ_l w_l k_l`, skipping zero weights, in one pass.
fn combine(out: &mut [f64], base: &[f64], dt: f64, w: &[f64], k: &[Vec<f64>]) {
    let terms: Vec<(f64, &[f64])> = w
        .iter()
        .zip(k)
        .filter(|(&wl, _)| wl != 0.0)
        .map(|(&wl, kl)| (dt * wl, kl.as_slice()))
        .collect();
    for (i, (o, &b)) in out.iter_mut().zip(base).enumerate() {
        let mut acc = b;
        for (f, kl) in &terms {
            acc += f * kl[i];
        }
        *o = acc;
    }
}

pub(crate) struct Engine<'a> {
    pub op: &'a TransportOperator<'a>,
    pub bd: &'a BoundaryData,
    pub integrator: Integrator,
    pub dt: f64,
    pub t0: f64,
}

impl Engine<'_> {
    fn clamp(&self, state: &mut [f64], t: f64) {
        let st = self.op.stencil();
        self.bd.write_slab(st.slab(), t, state);
        for &i in st.outside() {
            state[i] = 0.0;
        }
    }

    /// Integrates `frames * steps_per_frame` steps from `c0`.
    pub fn run(
        &self,
        c0: &[f64],
        frames: usize,
        steps_per_frame: usize,
        keep_checkpoints: bool,
    ) -> Trajectory {
        let tab = self.integrator.tableau();
        let n = c0.len();
        let s = tab.stages();
        let mut state = c0.to_vec();
        self.clamp(&mut state, self.t0);
        let mut recorded = vec![state.clone()];
        let mut checkpoints = Vec::new();
        let mut k: Vec<Vec<f64>> = vec![vec![0.0; n]; s];
        let mut y = vec![0.0; n];
        let mut max_err: f64 = 0.0;
        let total = frames * steps_per_frame;
        for step in 0..total {
            if keep_checkpoints {
                checkpoints.push(state.clone());
            }
            for j in 0..s {
                combine(&mut y, &state, self.dt, tab.a[j], &k);
                self.op.apply(&y, &mut k[j]);
            }
            if let Some(bl) = tab.b_low.filter(|_| !keep_checkpoints) {
                for i in 0..n {
                    let e: f64 = (0..s).map(|j| (tab.b[j] - bl[j]) * k[j][i]).sum();
                    max_err = max_err.max((self.dt * e).abs());
                }
            }
            y.copy_from_slice(&state);
            combine(&mut state, &y, self.dt, tab.b, &k);
            let t = self.t0 + (step + 1) as f64 * self.dt;
            self.clamp(&mut state, t);
            if (step + 1) % steps_per_frame == 0 {
                recorded.push(state.clone());
            }
        }
        Trajectory {
            checkpoints,
            frames: recorded,
            steps_per_frame,
            max_embedded_error: max_err,
        }
    }

    /// Reverse sweep. `frame_bars[f]` is the cotangent of recorded frame
    /// `f + 1`. Returns the coefficient cotangents.
    pub fn reverse(&self, traj: &Trajectory, frame_bars: &[Vec<f64>]) -> CoefficientBar {
        let tab = self.integrator.tableau();
        let st = self.op.stencil();
        let n = st.grid().len();
        let s = tab.stages();
        let mut bar = CoefficientBar::zeros(n);
        let mut lambda = vec![0.0; n];
        let mut ys: Vec<Vec<f64>> = vec![vec![0.0; n]; s];
        let mut k: Vec<Vec<f64>> = vec![vec![0.0; n]; s];
        let mut y_bar: Vec<Vec<f64>> = vec![vec![0.0; n]; s];
        let mut k_bar = vec![0.0; n];
        let total = traj.checkpoints.len();
        for step in (0..total).rev() {
            if (step + 1) % traj.steps_per_frame == 0 {
                let f = (step + 1) / traj.steps_per_frame - 1;
                if let Some(fb) = frame_bars.get(f) {
                    for (l, b) in lambda.iter_mut().zip(fb) {
                        *l += b;
                    }
                }
            }
            // clamped entries do not depend on the previous state
            for &i in st.slab() {
                lambda[i] = 0.0;
            }
            for &i in st.outside() {
                lambda[i] = 0.0;
            }
            // recompute the stages of this step
            let c = &traj.checkpoints[step];
            for j in 0..s {
                combine(&mut ys[j], c, self.dt, tab.a[j], &k);
                self.op.apply(&ys[j], &mut k[j]);
            }
            for j in (0..s).rev() {
                let fb = self.dt * tab.b[j];
                let later: Vec<(f64, &[f64])> = ((j + 1)..s)
                    .filter(|&m| tab.a[m][j] != 0.0)
                    .map(|m| (self.dt * tab.a[m][j], y_bar[m].as_slice()))
                    .collect();
                for i in 0..n {
                    let mut acc = fb * lambda[i];
                    for (f, yb) in &later {
                        acc += f * yb[i];
                    }
                    k_bar[i] = acc;
                }
                self.op.accumulate_coefficient_bar(&k_bar, &ys[j], &mut bar);
                self.op.apply_transpose(&k_bar, &mut y_bar[j]);
            }
            for (i, l) in lambda.iter_mut().enumerate() {
                for yb in &y_bar {
                    *l += yb[i];
                }
            }
        }
        bar
    }
}

/// Integrates the masked system from `c0` over `t_span` seconds, recording
/// a frame every `record_every` seconds (frame 0 is the initial state).
#[allow(clippy::too_many_arguments)]
pub fn integrate(
    c0: &ScalarField,
    v: &VectorField,
    d: &ScalarField,
    mask: &DomainMask,
    bd: &BoundaryData,
    cfg: &SolverConfig,
    t_span: f64,
    record_every: f64,
) -> Result<VolumeSeries> {
    let (series, _) = integrate_with_diagnostics(c0, v, d, mask, bd, cfg, t_span, record_every)?;
    Ok(series)
}

/// Like [`integrate`], also returning the largest embedded RK error seen.
#[allow(clippy::too_many_arguments)]
pub fn integrate_with_diagnostics(
    c0: &ScalarField,
    v: &VectorField,
    d: &ScalarField,
    mask: &DomainMask,
    bd: &BoundaryData,
    cfg: &SolverConfig,
    t_span: f64,
    record_every: f64,
) -> Result<(VolumeSeries, f64)> {
    cfg.validate()?;
    let grid = *mask.grid();
    grid.ensure_same(c0.grid(), "initial state")?;
    let steps_per_frame = whole_steps(record_every, cfg.dt, "record interval")?;
    if steps_per_frame == 0 {
        return Err(Error::Parameter("record interval must be positive".into()));
    }
    let frames = whole_steps(t_span, record_every, "time span")?;
    let (ve, de) = effective(cfg.mode, v, d);
    let cfl = cfl_check(ve, de, &grid, cfg.dt, cfg.cfl_safety);
    if !cfl.ok {
        return Err(Error::Cfl {
            dt: cfg.dt,
            max_stable_dt: cfl.max_stable_dt,
        });
    }
    let stencil = Stencil::new(mask);
    let op = TransportOperator::assemble(&stencil, ve, de, cfg.face)?;
    let engine = Engine {
        op: &op,
        bd,
        integrator: cfg.integrator,
        dt: cfg.dt,
        t0: 0.0,
    };
    let traj = engine.run(c0.as_slice(), frames, steps_per_frame, false);
    let out = traj
        .frames
        .into_iter()
        .map(|f| ScalarField::new(grid, f))
        .collect::<Result<Vec<_>>>()?;
    if out.iter().any(|f| !f.is_finite()) {
        return Err(Error::NonFinite("integrated state".into()));
    }
    Ok((VolumeSeries::new(record_every, out)?, traj.max_embedded_error))
}
