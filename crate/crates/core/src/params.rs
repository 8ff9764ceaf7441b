//! Parameterization of the physical fields by free optimization variables,
//! and the derived feature maps.
//!
//! Velocity is generated from two potentials as `V = ∇Γ₁ × ∇Γ₂`, which is
//! divergence-free in the continuum. On planar grids (one z slice) the
//! second potential is replaced by `Γ₂ = z`, so `V = (∂yΓ₁, −∂xΓ₁, 0)` and
//! `Γ₁` acts as a stream function.

use crate::error::Result;
use crate::grid::{
    axis_derivative, axis_derivative_adjoint_into, grad_fd, DiffScheme, Grid3, ScalarField,
    VectorField,
};

#[derive(Clone, Debug, PartialEq)]
pub struct Potentials {
    pub gamma1: ScalarField,
    pub gamma2: ScalarField,
}

impl Potentials {
    pub fn new(gamma1: ScalarField, gamma2: ScalarField) -> Result<Self> {
        gamma1.grid().ensure_same(gamma2.grid(), "potentials")?;
        Ok(Self { gamma1, gamma2 })
    }

    pub fn zeros(grid: Grid3) -> Self {
        Self {
            gamma1: ScalarField::zeros(grid),
            gamma2: ScalarField::zeros(grid),
        }
    }

    pub fn grid(&self) -> &Grid3 {
        self.gamma1.grid()
    }
}

/// Isotropic diffusivity parameter `L` with `D = L²` (mm/√s).
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusivityParamIso {
    pub l: ScalarField,
}

/// Per-voxel upper-triangular Cholesky factor, entries stored as
/// `[l11, l12, l13, l22, l23, l33]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CholeskyField {
    entries: [ScalarField; 6],
}

impl CholeskyField {
    /// Diagonal entries are folded to their absolute value so the factor
    /// keeps a non-negative diagonal.
    pub fn new(entries: [ScalarField; 6]) -> Result<Self> {
        for e in &entries[1..] {
            entries[0].grid().ensure_same(e.grid(), "cholesky entries")?;
        }
        let mut entries = entries;
        for d in [0, 3, 5] {
            entries[d] = entries[d].map(f64::abs);
        }
        Ok(Self { entries })
    }

    pub fn identity(grid: Grid3) -> Self {
        let one = ScalarField::constant(grid, 1.0);
        let zero = ScalarField::zeros(grid);
        Self {
            entries: [
                one.clone(),
                zero.clone(),
                zero.clone(),
                one.clone(),
                zero,
                one,
            ],
        }
    }

    pub fn grid(&self) -> &Grid3 {
        self.entries[0].grid()
    }

    pub fn factor_at(&self, idx: usize) -> [[f64; 3]; 3] {
        let e = |k: usize| self.entries[k].as_slice()[idx];
        [[e(0), e(1), e(2)], [0.0, e(3), e(4)], [0.0, 0.0, e(5)]]
    }
}

/// Per-voxel symmetric 3×3 diffusion tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorField {
    pub grid: Grid3,
    pub tensors: Vec<[[f64; 3]; 3]>,
}

/// Optional exports treat `+∞` entries of the Péclet maps as missing.
pub const PECLET_SENTINEL: f64 = f64::INFINITY;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMaps {
    /// ‖V‖₂ in mm/s.
    pub v_mag: ScalarField,
    /// |Vᵢ| / ‖V‖₂ per channel; 0 where V vanishes.
    pub v_rgb: [ScalarField; 3],
    /// Diffusivity in mm²/s.
    pub d: ScalarField,
    pub peclet: ScalarField,
    pub inv_peclet: ScalarField,
}

fn potential_gradients(p: &Potentials) -> (VectorField, VectorField) {
    let g1 = grad_fd(&p.gamma1, DiffScheme::Central);
    let g2 = if p.grid().is_planar() {
        let grid = *p.grid();
        VectorField::constant(grid, [0.0, 0.0, 1.0])
    } else {
        grad_fd(&p.gamma2, DiffScheme::Central)
    };
    (g1, g2)
}

fn cross_fields(a: &VectorField, b: &VectorField) -> VectorField {
    let grid = *a.grid();
    let n = grid.len();
    let (mut x, mut y, mut z) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let (ax, ay, az) = (a.x.as_slice(), a.y.as_slice(), a.z.as_slice());
    let (bx, by, bz) = (b.x.as_slice(), b.y.as_slice(), b.z.as_slice());
    for i in 0..n {
        x[i] = ay[i] * bz[i] - az[i] * by[i];
        y[i] = az[i] * bx[i] - ax[i] * bz[i];
        z[i] = ax[i] * by[i] - ay[i] * bx[i];
    }
    let mk = |v| ScalarField::new(grid, v).expect("same grid");
    VectorField {
        x: mk(x),
        y: mk(y),
        z: mk(z),
    }
}

/// `V = ∇Γ₁ × ∇Γ₂` with central differences.
pub fn velocity_from_potentials(p: &Potentials) -> Result<VectorField> {
    p.gamma1.grid().ensure_same(p.gamma2.grid(), "potentials")?;
    let (g1, g2) = potential_gradients(p);
    Ok(cross_fields(&g1, &g2))
}

/// Pulls a cotangent on V back to the two potentials.
///
/// With `V = g₁ × g₂`: `ḡ₁ = g₂ × V̄`, `ḡ₂ = V̄ × g₁`, then `Γ̄ = Dᵀ ḡ`.
pub fn velocity_from_potentials_adjoint(
    p: &Potentials,
    v_bar: &VectorField,
) -> (ScalarField, ScalarField) {
    let grid = *p.grid();
    let (g1, g2) = potential_gradients(p);
    let g1_bar = cross_fields(&g2, v_bar);
    let g2_bar = cross_fields(v_bar, &g1);
    let mut gamma1_bar = vec![0.0; grid.len()];
    let mut gamma2_bar = vec![0.0; grid.len()];
    for axis in 0..3 {
        axis_derivative_adjoint_into(
            g1_bar.component(axis),
            axis,
            DiffScheme::Central,
            &mut gamma1_bar,
        );
        if !grid.is_planar() {
            axis_derivative_adjoint_into(
                g2_bar.component(axis),
                axis,
                DiffScheme::Central,
                &mut gamma2_bar,
            );
        }
    }
    (
        ScalarField::new(grid, gamma1_bar).expect("same grid"),
        ScalarField::new(grid, gamma2_bar).expect("same grid"),
    )
}

/// `D = L²`.
pub fn diffusivity_iso(p: &DiffusivityParamIso) -> ScalarField {
    p.l.map(|l| l * l)
}

/// `D = LᵀL` per voxel.
pub fn diffusion_tensor_from_cholesky(c: &CholeskyField) -> TensorField {
    let grid = *c.grid();
    let tensors = (0..grid.len())
        .map(|idx| {
            let l = c.factor_at(idx);
            let mut d = [[0.0; 3]; 3];
            for (i, row) in d.iter_mut().enumerate() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = (0..3).map(|k| l[k][i] * l[k][j]).sum();
                }
            }
            d
        })
        .collect();
    TensorField { grid, tensors }
}

/// Speed, orientation colours and Péclet maps. `char_len` is the
/// characteristic length in mm.
pub fn feature_maps(v: &VectorField, d: &ScalarField, char_len: f64) -> Result<FeatureMaps> {
    v.grid().ensure_same(d.grid(), "feature maps")?;
    if !(char_len > 0.0 && char_len.is_finite()) {
        return Err(crate::Error::Parameter(format!(
            "characteristic length must be positive, got {char_len}"
        )));
    }
    let v_mag = v.magnitude();
    let rgb = |c: &ScalarField| {
        let data = c
            .as_slice()
            .iter()
            .zip(v_mag.as_slice())
            .map(|(&a, &m)| if m > 0.0 { (a.abs() / m).min(1.0) } else { 0.0 })
            .collect();
        ScalarField::new(*v.grid(), data).expect("same grid")
    };
    let v_rgb = [rgb(&v.x), rgb(&v.y), rgb(&v.z)];
    let ratio = |num: f64, den: f64| {
        if den > 0.0 {
            num / den
        } else {
            PECLET_SENTINEL
        }
    };
    let peclet = ScalarField::new(
        *v.grid(),
        v_mag
            .as_slice()
            .iter()
            .zip(d.as_slice())
            .map(|(&m, &dd)| ratio(char_len * m, dd))
            .collect(),
    )?;
    let inv_peclet = ScalarField::new(
        *v.grid(),
        v_mag
            .as_slice()
            .iter()
            .zip(d.as_slice())
            .map(|(&m, &dd)| ratio(dd, char_len * m))
            .collect(),
    )?;
    Ok(FeatureMaps {
        v_mag,
        v_rgb,
        d: d.clone(),
        peclet,
        inv_peclet,
    })
}

/// Central-difference derivative helper re-exported for the regularizers.
pub(crate) fn central(f: &ScalarField, axis: usize) -> ScalarField {
    axis_derivative(f, axis, DiffScheme::Central)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn grid(n: usize) -> Grid3 {
        Grid3::new([n, n, n], [1.0; 3]).unwrap()
    }

    #[test]
    fn unit_gradients_give_unit_z_velocity() {
        let g = Grid3::new([8, 8, 8], [0.5, 1.5, 1.0]).unwrap();
        let p = Potentials::new(
            ScalarField::from_fn(g, |x, _, _| x as f64 * 0.5),
            ScalarField::from_fn(g, |_, y, _| y as f64 * 1.5),
        )
        .unwrap();
        let v = velocity_from_potentials(&p).unwrap();
        for i in 0..g.len() {
            assert!(v.x.as_slice()[i].abs() < 1e-12);
            assert!(v.y.as_slice()[i].abs() < 1e-12);
            assert!((v.z.as_slice()[i] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn swapping_potentials_negates_velocity() {
        let g = grid(6);
        let a = ScalarField::from_fn(g, |x, y, z| ((x * 3 + y * 5 + z) % 7) as f64);
        let b = ScalarField::from_fn(g, |x, y, z| ((x + y * 2 + z * 4) % 5) as f64);
        let v = velocity_from_potentials(&Potentials::new(a.clone(), b.clone()).unwrap()).unwrap();
        let w = velocity_from_potentials(&Potentials::new(b, a).unwrap()).unwrap();
        for axis in 0..3 {
            for (p, q) in v.component(axis).as_slice().iter().zip(w.component(axis).as_slice()) {
                assert_eq!(*p, -*q);
            }
        }
    }

    #[test]
    fn trigonometric_potentials_match_closed_form() {
        // ∇Γ₁ = (2π/Lx cos(2πx/Lx), 0, 0), ∇Γ₂ = (0, −2π/Ly sin(2πy/Ly), 0)
        // V = ∇Γ₁ × ∇Γ₂ = (0, 0, −(2π)²/(Lx Ly) cos(.) sin(.))
        let n = 32;
        let g = grid(n);
        let len = n as f64;
        let p = Potentials::new(
            ScalarField::from_fn(g, |x, _, _| (2.0 * PI * x as f64 / len).sin()),
            ScalarField::from_fn(g, |_, y, _| (2.0 * PI * y as f64 / len).cos()),
        )
        .unwrap();
        let v = velocity_from_potentials(&p).unwrap();
        let k = 2.0 * PI / len;
        let mut err: f64 = 0.0;
        for z in 0..n {
            for y in 1..n - 1 {
                for x in 1..n - 1 {
                    let exact = -k * k * (k * x as f64).cos() * (k * y as f64).sin();
                    err = err.max((v.z.get(x, y, z) - exact).abs());
                    assert!(v.x.get(x, y, z).abs() < 1e-14);
                }
            }
        }
        // central differences: relative error ≈ (k h)² / 6 per factor
        let bound = 2.0 * k * k * (k * k / 6.0) * 1.05;
        assert!(err < bound, "err {err} bound {bound}");
    }

    #[test]
    fn planar_grid_uses_stream_function() {
        let g = Grid3::new([8, 8, 1], [1.0; 3]).unwrap();
        let p = Potentials::new(
            ScalarField::from_fn(g, |x, y, _| 2.0 * y as f64 - 3.0 * x as f64),
            ScalarField::from_fn(g, |x, _, _| x as f64),
        )
        .unwrap();
        let v = velocity_from_potentials(&p).unwrap();
        for i in 0..g.len() {
            assert!((v.x.as_slice()[i] - 2.0).abs() < 1e-12);
            assert!((v.y.as_slice()[i] - 3.0).abs() < 1e-12);
            assert_eq!(v.z.as_slice()[i], 0.0);
        }
    }

    #[test]
    fn potential_adjoint_dot_product() {
        // ⟨dV, V̄⟩ = ⟨dΓ, Γ̄⟩ for a linearization around p (finite difference)
        let g = Grid3::new([5, 4, 3], [1.1, 0.9, 1.3]).unwrap();
        let p = Potentials::new(
            ScalarField::from_fn(g, |x, y, z| ((x * 3 + y * 5 + z) % 7) as f64 * 0.1),
            ScalarField::from_fn(g, |x, y, z| ((x + y * 2 + z * 4) % 5) as f64 * 0.2),
        )
        .unwrap();
        let dir = ScalarField::from_fn(g, |x, y, z| ((x * 2 + y + z * 3) % 4) as f64 - 1.5);
        let vb = VectorField::new(
            ScalarField::from_fn(g, |x, _, _| x as f64),
            ScalarField::from_fn(g, |_, y, _| 1.0 - y as f64),
            ScalarField::from_fn(g, |_, _, z| 0.5 * z as f64),
        )
        .unwrap();
        let (b1, b2) = velocity_from_potentials_adjoint(&p, &vb);
        let eps = 1e-6;
        let dot = |v: &VectorField| -> f64 {
            (0..3)
                .map(|a| {
                    v.component(a)
                        .as_slice()
                        .iter()
                        .zip(vb.component(a).as_slice())
                        .map(|(x, y)| x * y)
                        .sum::<f64>()
                })
                .sum()
        };
        for which in 0..2 {
            let shift = |s: f64| {
                let mut q = p.clone();
                let target = if which == 0 { &mut q.gamma1 } else { &mut q.gamma2 };
                for (t, d) in target.as_mut_slice().iter_mut().zip(dir.as_slice()) {
                    *t += s * d;
                }
                dot(&velocity_from_potentials(&q).unwrap())
            };
            let fd = (shift(eps) - shift(-eps)) / (2.0 * eps);
            let bar = if which == 0 { &b1 } else { &b2 };
            let ad: f64 = bar.as_slice().iter().zip(dir.as_slice()).map(|(a, b)| a * b).sum();
            assert!((fd - ad).abs() < 1e-6 * ad.abs().max(1.0), "{fd} vs {ad}");
        }
    }

    #[test]
    fn isotropic_diffusivity_squares() {
        let g = grid(3);
        let d = diffusivity_iso(&DiffusivityParamIso {
            l: ScalarField::constant(g, 0.1),
        });
        assert!(d.as_slice().iter().all(|&v| (v - 0.01).abs() < 1e-15));
        let z = diffusivity_iso(&DiffusivityParamIso {
            l: ScalarField::zeros(g),
        });
        assert!(z.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cholesky_products() {
        let g = grid(2);
        let eye = diffusion_tensor_from_cholesky(&CholeskyField::identity(g));
        assert!(eye
            .tensors
            .iter()
            .all(|t| *t == [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]));
        let one = ScalarField::constant(g, 1.0);
        let zero = ScalarField::zeros(g);
        let c = CholeskyField::new([
            one.clone(),
            one.clone(),
            zero.clone(),
            one.clone(),
            zero.clone(),
            one,
        ])
        .unwrap();
        // L = [[1,1,0],[0,1,0],[0,0,1]] → LᵀL = [[1,1,0],[1,2,0],[0,0,1]]
        let d = diffusion_tensor_from_cholesky(&c);
        assert_eq!(d.tensors[0], [[1.0, 1.0, 0.0], [1.0, 2.0, 0.0], [0.0, 0.0, 1.0]]);
        let zeros = CholeskyField::new(std::array::from_fn(|_| zero.clone())).unwrap();
        assert!(diffusion_tensor_from_cholesky(&zeros)
            .tensors
            .iter()
            .all(|t| t.iter().flatten().all(|&v| v == 0.0)));
    }

    #[test]
    fn feature_map_arithmetic() {
        let g = grid(1);
        let v = VectorField::constant(g, [3.0, 4.0, 0.0]);
        let fm = feature_maps(&v, &ScalarField::constant(g, 0.02), 1.0).unwrap();
        assert_eq!(fm.v_mag.as_slice()[0], 5.0);
        assert!((fm.v_rgb[0].as_slice()[0] - 0.6).abs() < 1e-15);
        assert!((fm.v_rgb[1].as_slice()[0] - 0.8).abs() < 1e-15);
        assert_eq!(fm.v_rgb[2].as_slice()[0], 0.0);
        assert!((fm.peclet.as_slice()[0] - 250.0).abs() < 1e-9);

        let v = VectorField::constant(g, [2.0, 0.0, 0.0]);
        let fm = feature_maps(&v, &ScalarField::constant(g, 0.02), 1.0).unwrap();
        assert!((fm.peclet.as_slice()[0] - 100.0).abs() < 1e-9);

        let fm = feature_maps(&VectorField::zeros(g), &ScalarField::constant(g, 0.1), 1.0)
            .unwrap();
        assert_eq!(fm.peclet.as_slice()[0], 0.0);
        assert_eq!(fm.inv_peclet.as_slice()[0], PECLET_SENTINEL);
        assert!(feature_maps(&v, &ScalarField::zeros(g), 0.0).is_err());
    }
}
