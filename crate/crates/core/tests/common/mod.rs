#![allow(dead_code)]

use pdeflow::grid::{DomainMask, Grid3, ScalarField};
use pdeflow::loss::{LossConfig, Objective, Params, TrainingSample};
use pdeflow::params::{DiffusivityParamIso, Potentials};
use pdeflow::series::VolumeSeries;
use pdeflow::solver::TransportMode;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// One random small estimation problem.
pub struct GradInstance {
    pub mask: DomainMask,
    pub sample: TrainingSample,
    pub params: Params,
    pub cfg: LossConfig,
}

/// Potentials are two tilted planes plus small noise, so every velocity
/// component stays bounded away from zero and the upwind switch never
/// flips inside a finite-difference stencil.
pub fn grad_instance(seed: u64, mode: TransportMode, dirichlet: bool) -> GradInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = Grid3::new([8, 8, 4], [1.2, 1.2, 1.3]).unwrap();
    let n = grid.len();
    let c = grid.dims().map(|d| (d as f64 - 1.0) / 2.0);
    let inside: Vec<bool> = (0..n)
        .map(|idx| {
            let [x, y, _] = grid.coords(idx);
            let r2 = (x as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2);
            r2 <= 3.6f64.powi(2)
        })
        .collect();
    let mask = DomainMask::new(grid, inside, dirichlet).unwrap();

    let mut noise = |amp: f64| -> Vec<f64> {
        (0..n).map(|_| amp * rng.sample::<f64, _>(StandardNormal)).collect()
    };
    let n1 = [0.9, 0.7, 0.4];
    let n2 = [-0.5, 0.8, -1.1];
    let plane = |nv: [f64; 3], e: Vec<f64>| {
        let mut k = 0;
        ScalarField::from_fn(grid, |x, y, z| {
            let s = grid.spacing();
            let v = nv[0] * x as f64 * s[0] + nv[1] * y as f64 * s[1] + nv[2] * z as f64 * s[2] + e[k];
            k += 1;
            v
        })
    };
    let gamma1 = plane(n1, noise(0.01));
    let gamma2 = plane(n2, noise(0.01));
    let lnoise = noise(0.02);
    let l = ScalarField::new(grid, lnoise.iter().map(|e| 0.12 + e).collect()).unwrap();
    let frames: Vec<ScalarField> = (0..4)
        .map(|f| {
            let e = noise(0.3);
            ScalarField::new(grid, e.iter().map(|v| 1.0 + 0.2 * f as f64 + v.abs()).collect()).unwrap()
        })
        .collect();
    let series = VolumeSeries::new(0.1, frames).unwrap();
    let mut cfg = LossConfig::default();
    cfg.solver.mode = mode;
    GradInstance {
        mask,
        sample: TrainingSample { start: 0, series },
        params: Params {
            potentials: Potentials::new(gamma1, gamma2).unwrap(),
            diffusivity: DiffusivityParamIso { l },
        },
        cfg,
    }
}

fn perturbed(p: &Params, dir: &[Vec<f64>; 3], eps: f64) -> Params {
    let mut q = p.clone();
    let fields = [
        &mut q.potentials.gamma1,
        &mut q.potentials.gamma2,
        &mut q.diffusivity.l,
    ];
    for (f, d) in fields.into_iter().zip(dir) {
        for (v, dv) in f.as_mut_slice().iter_mut().zip(d) {
            *v += eps * dv;
        }
    }
    q
}

/// Largest relative error of `directions` random directional derivatives
/// against central differences with step `eps`.
pub fn directional_check(inst: &GradInstance, directions: usize, eps: f64, seed: u64) -> f64 {
    let obj = Objective::new(&inst.mask, inst.cfg).unwrap();
    let (_, g) = obj.gradients(&inst.sample, &inst.params).unwrap();
    let coeffs = obj.coefficients(&inst.params).unwrap();
    let loss = |p: &Params| obj.evaluate_with(&inst.sample, p, &coeffs).unwrap().loss.total;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = inst.mask.grid().len();
    let mut worst = 0.0f64;
    for _ in 0..directions {
        let dir: [Vec<f64>; 3] = std::array::from_fn(|_| {
            (0..n)
                .map(|i| {
                    let r: f64 = rng.sample(StandardNormal);
                    if inst.mask.is_inside(i) { r } else { 0.0 }
                })
                .collect()
        });
        let analytic: f64 = [&g.d_gamma1, &g.d_gamma2, &g.d_l]
            .iter()
            .zip(&dir)
            .map(|(f, d)| f.as_slice().iter().zip(d).map(|(a, b)| a * b).sum::<f64>())
            .sum();
        let fd = (loss(&perturbed(&inst.params, &dir, eps)) - loss(&perturbed(&inst.params, &dir, -eps)))
            / (2.0 * eps);
        let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-300);
        worst = worst.max(rel);
    }
    worst
}
