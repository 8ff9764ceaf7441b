//! Regular-grid containers, finite-difference stencils and separable
//! Gaussian smoothing.
//!
//! Voxel `(x, y, z)` of a grid with dims `(nx, ny, nz)` lives at flat index
//! `x + nx * (y + ny * z)`. Spacings are physical lengths in mm.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid3 {
    dims: [usize; 3],
    spacing: [f64; 3],
}

impl Grid3 {
    pub fn new(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Parameter(format!(
                "grid dims must be positive, got {dims:?}"
            )));
        }
        if spacing.iter().any(|&h| !(h.is_finite() && h > 0.0)) {
            return Err(Error::Parameter(format!(
                "grid spacing must be finite and positive, got {spacing:?}"
            )));
        }
        Ok(Self { dims, spacing })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat offsets between neighbours along each axis.
    pub fn strides(&self) -> [usize; 3] {
        [1, self.dims[0], self.dims[0] * self.dims[1]]
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let x = idx % self.dims[0];
        let yz = idx / self.dims[0];
        [x, yz % self.dims[1], yz / self.dims[1]]
    }

    /// A grid with a single z slice is a planar problem.
    pub fn is_planar(&self) -> bool {
        self.dims[2] == 1
    }

    /// Errors with a `GridMismatch` naming `what` unless the grids are equal.
    pub fn ensure_same(&self, other: &Grid3, what: &str) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "{what}: {:?}/{:?} vs {:?}/{:?}",
                self.dims, self.spacing, other.dims, other.spacing
            )))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    grid: Grid3,
    data: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: Grid3, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "field has {} values, grid {:?} needs {}",
                data.len(),
                grid.dims(),
                grid.len()
            )));
        }
        Ok(Self { grid, data })
    }

    pub fn zeros(grid: Grid3) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn constant(grid: Grid3, value: f64) -> Self {
        Self {
            grid,
            data: vec![value; grid.len()],
        }
    }

    /// Builds a field by evaluating `f(x, y, z)` at voxel indices.
    pub fn from_fn(grid: Grid3, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let [nx, ny, nz] = grid.dims();
        let mut data = Vec::with_capacity(grid.len());
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    data.push(f(x, y, z));
                }
            }
        }
        Self { grid, data }
    }

    pub fn grid(&self) -> &Grid3 {
        &self.grid
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.grid.index(x, y, z)]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            grid: self.grid,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scaled(&self, a: f64) -> Self {
        self.map(|v| a * v)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &ScalarField) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VectorField {
    pub x: ScalarField,
    pub y: ScalarField,
    pub z: ScalarField,
}

impl VectorField {
    pub fn new(x: ScalarField, y: ScalarField, z: ScalarField) -> Result<Self> {
        x.grid().ensure_same(y.grid(), "vector components")?;
        x.grid().ensure_same(z.grid(), "vector components")?;
        Ok(Self { x, y, z })
    }

    pub fn zeros(grid: Grid3) -> Self {
        Self::constant(grid, [0.0; 3])
    }

    pub fn constant(grid: Grid3, v: [f64; 3]) -> Self {
        Self {
            x: ScalarField::constant(grid, v[0]),
            y: ScalarField::constant(grid, v[1]),
            z: ScalarField::constant(grid, v[2]),
        }
    }

    pub fn grid(&self) -> &Grid3 {
        self.x.grid()
    }

    pub fn component(&self, axis: usize) -> &ScalarField {
        match axis {
            0 => &self.x,
            1 => &self.y,
            _ => &self.z,
        }
    }

    pub fn components(&self) -> [&ScalarField; 3] {
        [&self.x, &self.y, &self.z]
    }

    /// Pointwise Euclidean norm.
    pub fn magnitude(&self) -> ScalarField {
        let data = (0..self.grid().len())
            .map(|i| {
                let (a, b, c) = (
                    self.x.as_slice()[i],
                    self.y.as_slice()[i],
                    self.z.as_slice()[i],
                );
                (a * a + b * b + c * c).sqrt()
            })
            .collect();
        ScalarField {
            grid: *self.grid(),
            data,
        }
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self {
            x: self.x.scaled(a),
            y: self.y.scaled(a),
            z: self.z.scaled(a),
        }
    }
}

/// Finite-difference flavour for first derivatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DiffScheme {
    Forward,
    Backward,
    Central,
}

/// Stencil taps `(offset, weight)` for the derivative at position `i` on an
/// axis of length `n`, with weights in units of `1/h`. One-sided schemes
/// fall back to the other side at the edge; an axis of length 1 has no taps.
#[inline]
pub(crate) fn axis_taps(i: usize, n: usize, scheme: DiffScheme) -> [(isize, f64); 2] {
    const NONE: [(isize, f64); 2] = [(0, 0.0), (0, 0.0)];
    const FWD: [(isize, f64); 2] = [(1, 1.0), (0, -1.0)];
    const BWD: [(isize, f64); 2] = [(0, 1.0), (-1, -1.0)];
    if n == 1 {
        return NONE;
    }
    match scheme {
        DiffScheme::Forward => {
            if i + 1 < n {
                FWD
            } else {
                BWD
            }
        }
        DiffScheme::Backward => {
            if i > 0 {
                BWD
            } else {
                FWD
            }
        }
        DiffScheme::Central => {
            if i == 0 {
                FWD
            } else if i + 1 == n {
                BWD
            } else {
                [(1, 0.5), (-1, -0.5)]
            }
        }
    }
}

/// Derivative of `f` along `axis`.
pub fn axis_derivative(f: &ScalarField, axis: usize, scheme: DiffScheme) -> ScalarField {
    let grid = *f.grid();
    let n = grid.dims()[axis];
    let stride = grid.strides()[axis] as isize;
    let inv_h = 1.0 / grid.spacing()[axis];
    let src = f.as_slice();
    let mut out = vec![0.0; grid.len()];
    if n > 1 {
        for (idx, o) in out.iter_mut().enumerate() {
            let i = grid.coords(idx)[axis];
            let mut acc = 0.0;
            for (off, w) in axis_taps(i, n, scheme) {
                acc += w * src[(idx as isize + off * stride) as usize];
            }
            *o = acc * inv_h;
        }
    }
    ScalarField { grid, data: out }
}

/// Transpose of [`axis_derivative`]: accumulates `Dᵀ bar` into `acc`.
pub fn axis_derivative_adjoint_into(
    bar: &ScalarField,
    axis: usize,
    scheme: DiffScheme,
    acc: &mut [f64],
) {
    let grid = *bar.grid();
    let n = grid.dims()[axis];
    if n == 1 {
        return;
    }
    let stride = grid.strides()[axis] as isize;
    let inv_h = 1.0 / grid.spacing()[axis];
    for (idx, &b) in bar.as_slice().iter().enumerate() {
        if b == 0.0 {
            continue;
        }
        let i = grid.coords(idx)[axis];
        for (off, w) in axis_taps(i, n, scheme) {
            acc[(idx as isize + off * stride) as usize] += w * inv_h * b;
        }
    }
}

/// Gradient of a scalar field.
pub fn grad_fd(f: &ScalarField, scheme: DiffScheme) -> VectorField {
    VectorField {
        x: axis_derivative(f, 0, scheme),
        y: axis_derivative(f, 1, scheme),
        z: axis_derivative(f, 2, scheme),
    }
}

/// Divergence of a vector field.
pub fn divergence_fd(v: &VectorField, scheme: DiffScheme) -> Result<ScalarField> {
    v.x.grid().ensure_same(v.y.grid(), "divergence")?;
    v.x.grid().ensure_same(v.z.grid(), "divergence")?;
    let mut out = axis_derivative(&v.x, 0, scheme);
    for axis in 1..3 {
        let d = axis_derivative(v.component(axis), axis, scheme);
        for (o, a) in out.data.iter_mut().zip(d.data) {
            *o += a;
        }
    }
    Ok(out)
}

/// Maps an arbitrary integer position onto `[0, n)` by half-sample
/// symmetric reflection (`... b a | a b c | c b ...`).
#[inline]
fn reflect(m: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let r = m.rem_euclid(period) as usize;
    if r >= n {
        2 * n - 1 - r
    } else {
        r
    }
}

/// Normalized 1D Gaussian taps on `[-radius, radius]`, radius = ⌈3σ⌉.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|t| (-(t * t) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= s);
    k
}

/// Separable truncated Gaussian smoothing with σ in voxel units.
///
/// Taps that fall outside the grid are reflected back inside (half-sample
/// symmetric). The resulting operator is symmetric and row-stochastic, so it
/// preserves constants, total mass and positivity. σ = 0 is the identity.
pub fn gaussian_smooth(f: &ScalarField, sigma: f64) -> Result<ScalarField> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Parameter(format!(
            "smoothing sigma must be >= 0, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(f.clone());
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let grid = *f.grid();
    let mut cur = f.data.clone();
    let mut next = vec![0.0; cur.len()];
    for axis in 0..3 {
        let n = grid.dims()[axis];
        if n == 1 {
            continue;
        }
        let stride = grid.strides()[axis];
        for (idx, o) in next.iter_mut().enumerate() {
            let i = grid.coords(idx)[axis];
            let base = idx - i * stride;
            let mut acc = 0.0;
            for (t, w) in kernel.iter().enumerate() {
                let j = reflect(i as isize + t as isize - radius, n);
                acc += w * cur[base + j * stride];
            }
            *o = acc;
        }
        std::mem::swap(&mut cur, &mut next);
    }
    Ok(ScalarField { grid, data: cur })
}

/// Per-voxel role in the mixed boundary problem.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundaryClass {
    Interior,
    DirichletSlab,
    NeumannContour,
    Outside,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainMask {
    grid: Grid3,
    inside: Vec<bool>,
    class: Vec<BoundaryClass>,
}

impl DomainMask {
    /// Classifies every voxel. With `dirichlet_slabs`, inside voxels on the
    /// first and last z slice receive measured values; all remaining inside
    /// voxels touching the outside (or the grid edge) are Neumann contour.
    pub fn new(grid: Grid3, inside: Vec<bool>, dirichlet_slabs: bool) -> Result<Self> {
        if inside.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "mask has {} voxels, grid needs {}",
                inside.len(),
                grid.len()
            )));
        }
        let [_, _, nz] = grid.dims();
        if dirichlet_slabs && nz < 2 {
            return Err(Error::Parameter(
                "Dirichlet slabs need at least two z slices".into(),
            ));
        }
        let strides = grid.strides();
        let class = (0..grid.len())
            .map(|idx| {
                if !inside[idx] {
                    return BoundaryClass::Outside;
                }
                let c = grid.coords(idx);
                if dirichlet_slabs && (c[2] == 0 || c[2] == nz - 1) {
                    return BoundaryClass::DirichletSlab;
                }
                let touches_outside = (0..3).any(|a| {
                    let n = grid.dims()[a];
                    if n == 1 {
                        return false;
                    }
                    (c[a] == 0 || !inside[idx - strides[a]])
                        || (c[a] + 1 == n || !inside[idx + strides[a]])
                });
                if touches_outside {
                    BoundaryClass::NeumannContour
                } else {
                    BoundaryClass::Interior
                }
            })
            .collect();
        Ok(Self { grid, inside, class })
    }

    /// Every voxel inside; no Dirichlet slabs (closed Neumann box).
    pub fn full(grid: Grid3) -> Self {
        Self::new(grid, vec![true; grid.len()], false).expect("valid full mask")
    }

    pub fn grid(&self) -> &Grid3 {
        &self.grid
    }

    pub fn inside(&self) -> &[bool] {
        &self.inside
    }

    #[inline]
    pub fn is_inside(&self, idx: usize) -> bool {
        self.inside[idx]
    }

    pub fn class(&self, idx: usize) -> BoundaryClass {
        self.class[idx]
    }

    pub fn classes(&self) -> &[BoundaryClass] {
        &self.class
    }

    pub fn count_inside(&self) -> usize {
        self.inside.iter().filter(|&&b| b).count()
    }

    pub fn has_dirichlet(&self) -> bool {
        self.class.contains(&BoundaryClass::DirichletSlab)
    }

    /// Zeroes every outside voxel of `f` in place.
    pub fn apply(&self, f: &mut ScalarField) {
        for (v, &ins) in f.as_mut_slice().iter_mut().zip(&self.inside) {
            if !ins {
                *v = 0.0;
            }
        }
    }

    /// Mean of `f` over inside voxels.
    pub fn mean(&self, f: &[f64]) -> f64 {
        let (s, n) = f
            .iter()
            .zip(&self.inside)
            .filter(|(_, &b)| b)
            .fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    }

    pub fn values<'a>(&'a self, f: &'a ScalarField) -> impl Iterator<Item = f64> + 'a {
        f.as_slice()
            .iter()
            .zip(&self.inside)
            .filter(|(_, &b)| b)
            .map(|(&v, _)| v)
    }
}
