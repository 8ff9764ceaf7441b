//! Seven-point transport operator `C ↦ −V·∇C + ∇·(D∇C)`.
//!
//! The semi-discrete right-hand side is linear in `C` for fixed `(V, D)`,
//! so it is assembled once into per-voxel stencil coefficients. Slot 0 is
//! the voxel itself, slots `2a+1` / `2a+2` its lower / upper neighbour
//! along axis `a`. A neighbour that is outside the domain (or beyond the
//! grid edge) is replaced by the voxel itself, which mirrors the state
//! across the face and gives a zero normal gradient there.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::grid::{BoundaryClass, DomainMask, Grid3, ScalarField, VectorField};

pub const SLOTS: usize = 7;

/// Which voxel diffusivity a face flux uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum FaceDiffusivity {
    /// Arithmetic mean of the two voxels sharing the face.
    #[default]
    Mean,
    /// Forward difference of `D · (backward difference of C)`: the face
    /// between `i` and `i+1` uses `D[i+1]`.
    Nested,
}

#[inline]
fn opposite(slot: usize) -> usize {
    if slot % 2 == 1 {
        slot + 1
    } else {
        slot - 1
    }
}

/// Neighbour structure of a masked grid.
#[derive(Clone, Debug)]
pub struct Stencil {
    grid: Grid3,
    nbr: Vec<[u32; SLOTS]>,
    /// Bit `k - 1` is set when slot `k` is a real (not mirrored) neighbour.
    links: Vec<u8>,
    /// Voxels whose state evolves (inside and not Dirichlet).
    active: Vec<bool>,
    slab: Vec<usize>,
    outside: Vec<usize>,
}

impl Stencil {
    pub fn new(mask: &DomainMask) -> Self {
        let grid = *mask.grid();
        let dims = grid.dims();
        let strides = grid.strides();
        let nbr: Vec<[u32; SLOTS]> = (0..grid.len())
            .map(|idx| {
                let mut s = [idx as u32; SLOTS];
                if !mask.is_inside(idx) {
                    return s;
                }
                let c = grid.coords(idx);
                for a in 0..3 {
                    if c[a] > 0 && mask.is_inside(idx - strides[a]) {
                        s[2 * a + 1] = (idx - strides[a]) as u32;
                    }
                    if c[a] + 1 < dims[a] && mask.is_inside(idx + strides[a]) {
                        s[2 * a + 2] = (idx + strides[a]) as u32;
                    }
                }
                s
            })
            .collect();
        let links = nbr
            .iter()
            .enumerate()
            .map(|(idx, nb)| {
                (1..SLOTS)
                    .filter(|&k| nb[k] as usize != idx)
                    .fold(0u8, |acc, k| acc | 1 << (k - 1))
            })
            .collect();
        let active = mask
            .classes()
            .iter()
            .map(|c| matches!(c, BoundaryClass::Interior | BoundaryClass::NeumannContour))
            .collect();
        let slab = (0..grid.len())
            .filter(|&i| mask.class(i) == BoundaryClass::DirichletSlab)
            .collect();
        let outside = (0..grid.len()).filter(|&i| !mask.is_inside(i)).collect();
        Self {
            grid,
            nbr,
            links,
            active,
            slab,
            outside,
        }
    }

    /// Whole grid inside, no Dirichlet voxels; grid edges are mirrored.
    pub fn unmasked(grid: Grid3) -> Self {
        Self::new(&DomainMask::full(grid))
    }

    pub fn grid(&self) -> &Grid3 {
        &self.grid
    }

    pub fn slab(&self) -> &[usize] {
        &self.slab
    }

    pub fn outside(&self) -> &[usize] {
        &self.outside
    }

    pub fn is_active(&self, idx: usize) -> bool {
        self.active[idx]
    }
}

/// Assembled stencil coefficients for fixed `(V, D)`.
#[derive(Clone, Debug)]
pub struct TransportOperator<'s> {
    stencil: &'s Stencil,
    /// Mirrored neighbours contribute nothing (their difference vanishes),
    /// so every nonzero off-diagonal slot refers to a geometric neighbour.
    coef: Vec<[f64; SLOTS]>,
    /// Row `j` of `Aᵀ` in the neighbour layout of voxel `j`.
    coef_t: Vec<[f64; SLOTS]>,
}

/// `out = M y` for rows without mirrored slots, walking x-lines so neighbours are found by
/// stride instead of through the index table.
fn sweep(grid: &Grid3, rows: &[[f64; SLOTS]], y: &[f64], out: &mut [f64]) {
    let [nx, ny, nz] = grid.dims();
    let sy = nx;
    let sz = nx * ny;
    for z in 0..nz {
        for yy in 0..ny {
            let base = z * sz + yy * sy;
            let (ym, yp) = (yy > 0, yy + 1 < ny);
            let (zm, zp) = (z > 0, z + 1 < nz);
            for x in 0..nx {
                let i = base + x;
                let r = &rows[i];
                let mut acc = r[0] * y[i];
                if x > 0 {
                    acc += r[1] * y[i - 1];
                }
                if x + 1 < nx {
                    acc += r[2] * y[i + 1];
                }
                if ym {
                    acc += r[3] * y[i - sy];
                }
                if yp {
                    acc += r[4] * y[i + sy];
                }
                if zm {
                    acc += r[5] * y[i - sz];
                }
                if zp {
                    acc += r[6] * y[i + sz];
                }
                out[i] = acc;
            }
        }
    }
}

/// Cotangents of the off-diagonal stencil coefficients, accumulated by the
/// reverse sweep. Entry `k - 1` of voxel `i` holds `Σ k̄ᵢ (y[nbr_k] − yᵢ)`,
/// which is all the row-sum-free coefficient structure needs.
#[derive(Clone, Debug)]
pub struct CoefficientBar(pub Vec<[f64; SLOTS - 1]>);

impl CoefficientBar {
    pub fn zeros(n: usize) -> Self {
        Self(vec![[0.0; SLOTS - 1]; n])
    }
}

impl<'s> TransportOperator<'s> {
    /// `v = None` drops advection; `d = None` drops diffusion.
    pub fn assemble(
        stencil: &'s Stencil,
        v: Option<&VectorField>,
        d: Option<&ScalarField>,
        face: FaceDiffusivity,
    ) -> Result<Self> {
        let grid = *stencil.grid();
        if let Some(v) = v {
            grid.ensure_same(v.grid(), "velocity")?;
        }
        if let Some(d) = d {
            grid.ensure_same(d.grid(), "diffusivity")?;
        }
        let spacing = grid.spacing();
        let mut coef = vec![[0.0; SLOTS]; grid.len()];
        for (idx, row) in coef.iter_mut().enumerate() {
            if !stencil.active[idx] {
                continue;
            }
            let nb = &stencil.nbr[idx];
            for a in 0..3 {
                let h = spacing[a];
                if let Some(v) = v {
                    let va = v.component(a).as_slice()[idx];
                    if va > 0.0 && nb[2 * a + 1] as usize != idx {
                        row[0] -= va / h;
                        row[2 * a + 1] += va / h;
                    } else if va < 0.0 && nb[2 * a + 2] as usize != idx {
                        row[0] += va / h;
                        row[2 * a + 2] -= va / h;
                    }
                }
                if let Some(d) = d {
                    let dd = d.as_slice();
                    for slot in [2 * a + 1, 2 * a + 2] {
                        let j = nb[slot] as usize;
                        if j == idx {
                            continue;
                        }
                        let df = face_value(face, slot, dd[idx], dd[j]);
                        let w = df / (h * h);
                        row[slot] += w;
                        row[0] -= w;
                    }
                }
            }
        }
        let coef_t = stencil
            .nbr
            .iter()
            .enumerate()
            .map(|(j, nb)| {
                let mut row = [0.0; SLOTS];
                for k in 0..SLOTS {
                    let i = nb[k] as usize;
                    row[k] = if k == 0 {
                        coef[j][0]
                    } else if i == j {
                        0.0
                    } else {
                        coef[i][opposite(k)]
                    };
                }
                row
            })
            .collect();
        Ok(Self {
            stencil,
            coef,
            coef_t,
        })
    }

    pub fn stencil(&self) -> &Stencil {
        self.stencil
    }

    /// `out = A y`.
    pub fn apply(&self, y: &[f64], out: &mut [f64]) {
        sweep(&self.stencil.grid, &self.coef, y, out);
    }

    /// `out = Aᵀ y`, evaluated as a gather so each output is independent.
    pub fn apply_transpose(&self, y: &[f64], out: &mut [f64]) {
        sweep(&self.stencil.grid, &self.coef_t, y, out);
    }

    /// Adds the cotangent of `A y` with respect to the coefficients.
    pub fn accumulate_coefficient_bar(&self, k_bar: &[f64], y: &[f64], bar: &mut CoefficientBar) {
        let [nx, ny, _] = self.stencil.grid.dims();
        let offsets = [1, nx, nx * ny];
        let links = &self.stencil.links;
        for (idx, b) in bar.0.iter_mut().enumerate() {
            let kb = k_bar[idx];
            if kb == 0.0 {
                continue;
            }
            let l = links[idx];
            let yi = y[idx];
            for (a, &off) in offsets.iter().enumerate() {
                if l & (1 << (2 * a)) != 0 {
                    b[2 * a] += kb * (y[idx - off] - yi);
                }
                if l & (2 << (2 * a)) != 0 {
                    b[2 * a + 1] += kb * (y[idx + off] - yi);
                }
            }
        }
    }

    /// Pulls coefficient cotangents back to velocity and diffusivity.
    ///
    /// Upwinding is piecewise linear in V; at `V = 0` the average of the
    /// two one-sided slopes is used.
    pub fn pullback(
        &self,
        v: Option<&VectorField>,
        d: Option<&ScalarField>,
        face: FaceDiffusivity,
        bar: &CoefficientBar,
    ) -> (Option<VectorField>, Option<ScalarField>) {
        let grid = *self.stencil.grid();
        let spacing = grid.spacing();
        let n = grid.len();
        let mut v_bar = v.map(|_| [vec![0.0; n], vec![0.0; n], vec![0.0; n]]);
        let mut d_bar = d.map(|_| vec![0.0; n]);
        for idx in 0..n {
            if !self.stencil.active[idx] {
                continue;
            }
            let b = &bar.0[idx];
            let nb = &self.stencil.nbr[idx];
            for a in 0..3 {
                let h = spacing[a];
                if let (Some(v), Some(vb)) = (v, v_bar.as_mut()) {
                    let va = v.component(a).as_slice()[idx];
                    let pos = b[2 * a] / h;
                    let neg = -b[2 * a + 1] / h;
                    vb[a][idx] += if va > 0.0 {
                        pos
                    } else if va < 0.0 {
                        neg
                    } else {
                        0.5 * (pos + neg)
                    };
                }
                if let Some(db) = d_bar.as_mut() {
                    for slot in [2 * a + 1, 2 * a + 2] {
                        let j = nb[slot] as usize;
                        if j == idx {
                            continue;
                        }
                        let g = b[slot - 1] / (h * h);
                        match face {
                            FaceDiffusivity::Mean => {
                                db[idx] += 0.5 * g;
                                db[j] += 0.5 * g;
                            }
                            FaceDiffusivity::Nested => {
                                if slot % 2 == 0 {
                                    db[j] += g;
                                } else {
                                    db[idx] += g;
                                }
                            }
                        }
                    }
                }
            }
        }
        let v_out = v_bar.map(|[x, y, z]| {
            let mk = |d| ScalarField::new(grid, d).expect("grid length");
            VectorField {
                x: mk(x),
                y: mk(y),
                z: mk(z),
            }
        });
        let d_out = d_bar.map(|d| ScalarField::new(grid, d).expect("grid length"));
        (v_out, d_out)
    }
}

#[inline]
fn face_value(face: FaceDiffusivity, slot: usize, here: f64, there: f64) -> f64 {
    match face {
        FaceDiffusivity::Mean => 0.5 * (here + there),
        // upper-neighbour slots are even; the face uses the upper voxel
        FaceDiffusivity::Nested => {
            if slot.is_multiple_of(2) {
                there
            } else {
                here
            }
        }
    }
}

/// `−V·∇C` by first-order upwinding on the whole grid (edges mirrored).
pub fn advect_upwind(c: &ScalarField, v: &VectorField) -> Result<ScalarField> {
    c.grid().ensure_same(v.grid(), "advection")?;
    let stencil = Stencil::unmasked(*c.grid());
    let op = TransportOperator::assemble(&stencil, Some(v), None, FaceDiffusivity::Mean)?;
    let mut out = vec![0.0; c.grid().len()];
    op.apply(c.as_slice(), &mut out);
    ScalarField::new(*c.grid(), out)
}

/// `∇·(D∇C)` in flux form on the whole grid (zero flux through edges).
pub fn diffuse(c: &ScalarField, d: &ScalarField) -> Result<ScalarField> {
    diffuse_with(c, d, FaceDiffusivity::Mean)
}

pub fn diffuse_with(c: &ScalarField, d: &ScalarField, face: FaceDiffusivity) -> Result<ScalarField> {
    c.grid().ensure_same(d.grid(), "diffusion")?;
    let stencil = Stencil::unmasked(*c.grid());
    let op = TransportOperator::assemble(&stencil, None, Some(d), face)?;
    let mut out = vec![0.0; c.grid().len()];
    op.apply(c.as_slice(), &mut out);
    ScalarField::new(*c.grid(), out)
}
