use pdeflow::grid::{gaussian_smooth, DomainMask, Grid3, ScalarField, VectorField};
use pdeflow::io::{add_rician_noise, read_series, signal_to_concentration, write_series, NoiseScale};
use pdeflow::metrics::{abs_t, mirror_mask, rel_mean, rel_std, MidlineAxis, TTest};
use pdeflow::series::VolumeSeries;
use pdeflow::solver::{FaceDiffusivity, Stencil, TransportOperator};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn grid_strategy() -> impl Strategy<Value = Grid3> {
    (2usize..7, 1usize..6, 1usize..5, 0.5f64..2.0, 0.5f64..2.0, 0.5f64..2.0)
        .prop_map(|(nx, ny, nz, hx, hy, hz)| Grid3::new([nx, ny, nz], [hx, hy, hz]).unwrap())
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn field(grid: Grid3, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> ScalarField {
    ScalarField::new(grid, random_vec(rng, grid.len(), lo, hi)).unwrap()
}

/// Random mask with at least one inside voxel.
fn random_mask(grid: Grid3, rng: &mut ChaCha8Rng, slabs: bool) -> DomainMask {
    let mut inside: Vec<bool> = (0..grid.len()).map(|_| rng.gen_bool(0.8)).collect();
    inside[0] = true;
    DomainMask::new(grid, inside, slabs).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn operator_transpose_is_adjoint(grid in grid_strategy(), seed in any::<u64>(), slabs in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = random_mask(grid, &mut rng, slabs && grid.dims()[2] >= 2);
        let stencil = Stencil::new(&mask);
        let v = VectorField::new(field(grid, &mut rng, -2.0, 2.0), field(grid, &mut rng, -2.0, 2.0), field(grid, &mut rng, -2.0, 2.0)).unwrap();
        let d = field(grid, &mut rng, 0.0, 0.3);
        let op = TransportOperator::assemble(&stencil, Some(&v), Some(&d), FaceDiffusivity::Mean).unwrap();
        let x = random_vec(&mut rng, grid.len(), -1.0, 1.0);
        let y = random_vec(&mut rng, grid.len(), -1.0, 1.0);
        let (mut ax, mut aty) = (vec![0.0; grid.len()], vec![0.0; grid.len()]);
        op.apply(&x, &mut ax);
        op.apply_transpose(&y, &mut aty);
        let (l, r) = (dot(&ax, &y), dot(&x, &aty));
        prop_assert!((l - r).abs() <= 1e-12 * (1.0 + l.abs()), "{} vs {}", l, r);
    }

    #[test]
    fn operator_is_linear(grid in grid_strategy(), seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = random_mask(grid, &mut rng, false);
        let stencil = Stencil::new(&mask);
        let v = VectorField::new(field(grid, &mut rng, -2.0, 2.0), field(grid, &mut rng, -2.0, 2.0), field(grid, &mut rng, -2.0, 2.0)).unwrap();
        let d = field(grid, &mut rng, 0.0, 0.3);
        let op = TransportOperator::assemble(&stencil, Some(&v), Some(&d), FaceDiffusivity::Nested).unwrap();
        let n = grid.len();
        let x = random_vec(&mut rng, n, -1.0, 1.0);
        let y = random_vec(&mut rng, n, -1.0, 1.0);
        let combo: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let (mut ax, mut ay, mut ac) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        op.apply(&x, &mut ax);
        op.apply(&y, &mut ay);
        op.apply(&combo, &mut ac);
        for i in 0..n {
            let expect = a * ax[i] + b * ay[i];
            prop_assert!((ac[i] - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
        }
    }

    #[test]
    fn diffusion_conserves_mass_under_zero_flux(grid in grid_strategy(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = random_mask(grid, &mut rng, false);
        let stencil = Stencil::new(&mask);
        let d = field(grid, &mut rng, 0.0, 0.3);
        let op = TransportOperator::assemble(&stencil, None, Some(&d), FaceDiffusivity::Mean).unwrap();
        let c = random_vec(&mut rng, grid.len(), 0.0, 2.0);
        let mut out = vec![0.0; grid.len()];
        op.apply(&c, &mut out);
        let total: f64 = (0..grid.len()).filter(|&i| mask.is_inside(i)).map(|i| out[i]).sum();
        prop_assert!(total.abs() < 1e-12);
    }

    #[test]
    fn smoothing_keeps_constants_and_bounds(grid in grid_strategy(), seed in any::<u64>(), sigma in 0.0f64..2.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = field(grid, &mut rng, 0.0, 5.0);
        let s = gaussian_smooth(&f, sigma).unwrap();
        prop_assert!(s.min() >= f.min() - 1e-12 && s.max() <= f.max() + 1e-12);
        let k = ScalarField::constant(grid, 1.25);
        let sk = gaussian_smooth(&k, sigma).unwrap();
        prop_assert!(sk.max_abs_diff(&k) < 1e-12);
    }

    #[test]
    fn region_metrics_are_symmetric(seed in any::<u64>(), na in 2usize..30, nb in 2usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_vec(&mut rng, na, 0.1, 4.0);
        let b = random_vec(&mut rng, nb, 0.1, 4.0);
        let m = rel_mean(&a, &b).unwrap();
        prop_assert_eq!(m, rel_mean(&b, &a).unwrap());
        prop_assert!(m > 0.0 && m <= 1.0);
        let s = rel_std(&a, &b).unwrap();
        prop_assert!(s <= 1.0);
        for test in [TTest::Welch, TTest::Pooled] {
            let t1 = abs_t(&a, &b, test).unwrap().abs_t;
            let t2 = abs_t(&b, &a, test).unwrap().abs_t;
            prop_assert!((t1 - t2).abs() <= 1e-12 * (1.0 + t1));
        }
    }

    #[test]
    fn mirroring_is_an_involution(nx in 4usize..12, ny in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = Grid3::new([nx, ny, 2], [1.0; 3]).unwrap();
        let domain = DomainMask::full(grid);
        let mid = nx / 2;
        // keep the lesion on one side so it never overlaps its reflection
        let lesion: Vec<bool> = (0..grid.len())
            .map(|i| {
                let x = grid.coords(i)[0];
                x < mid && 2 * mid - x < nx && rng.gen_bool(0.5)
            })
            .collect();
        let pair = mirror_mask(&lesion, MidlineAxis::X, mid, &domain).unwrap();
        prop_assert_eq!(pair.dropped, 0);
        let back = mirror_mask(&pair.c_lesion, MidlineAxis::X, mid, &domain).unwrap();
        prop_assert_eq!(&back.c_lesion, &lesion);
    }

    #[test]
    fn conversion_ignores_signal_scale(seed in any::<u64>(), k in 1e-3f64..1e3, frames in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = Grid3::new([3, 3, 2], [1.0; 3]).unwrap();
        let base = field(grid, &mut rng, 10.0, 100.0);
        let fs: Vec<ScalarField> = (0..frames)
            .map(|_| {
                let k = rng.gen_range(0.2..1.0);
                base.map(|s| s * k)
            })
            .collect();
        let mut all = vec![base];
        all.extend(fs);
        let a = signal_to_concentration(&VolumeSeries::new(1.0, all.clone()).unwrap(), 1, 1.0).unwrap().series;
        let scaled: Vec<ScalarField> = all.iter().map(|f| f.scaled(k)).collect();
        let b = signal_to_concentration(&VolumeSeries::new(1.0, scaled).unwrap(), 1, 1.0).unwrap().series;
        for (x, y) in a.frames().iter().zip(b.frames()) {
            prop_assert!(x.max_abs_diff(y) < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn series_round_trip_is_exact_for_f32_values(grid in grid_strategy(), seed in any::<u64>(), frames in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fs: Vec<ScalarField> = (0..frames)
            .map(|_| field(grid, &mut rng, -10.0, 10.0).map(|v| v as f32 as f64))
            .collect();
        let mut s = VolumeSeries::new(0.5, fs).unwrap();
        s.meta.insert("note".into(), "round trip".into());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.json");
        write_series(&s, &path).unwrap();
        let r = read_series(&path).unwrap();
        prop_assert_eq!(r.len(), s.len());
        prop_assert_eq!(r.dt_frames(), s.dt_frames());
        prop_assert_eq!(&r.meta, &s.meta);
        for (x, y) in r.frames().iter().zip(s.frames()) {
            prop_assert_eq!(x.as_slice(), y.as_slice());
        }
    }
}

/// For a zero signal the Rician magnitude is Rayleigh with mean `σ√(π/2)`.
#[test]
fn rician_noise_on_zero_signal_is_rayleigh() {
    let grid = Grid3::new([40, 40, 25], [1.0; 3]).unwrap();
    let mut peak = ScalarField::zeros(grid);
    peak.as_mut_slice()[0] = 10.0;
    let s = VolumeSeries::new(1.0, vec![peak]).unwrap();
    let level = 0.05;
    let noisy = add_rician_noise(&s, level, 42, NoiseScale::FrameMax).unwrap();
    let sigma = level * 10.0;
    let vals = &noisy.frames()[0].as_slice()[1..];
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let second = vals.iter().map(|v| v * v).sum::<f64>() / n;
    let expect_mean = sigma * (std::f64::consts::PI / 2.0).sqrt();
    // standard error of the Rayleigh mean is about 0.52σ/√n
    assert!((mean - expect_mean).abs() < 5.0 * 0.53 * sigma / n.sqrt(), "{mean} vs {expect_mean}");
    assert!((second - 2.0 * sigma * sigma).abs() < 0.02 * 2.0 * sigma * sigma);
}

#[test]
fn rician_noise_streams_are_per_frame_and_seeded() {
    let grid = Grid3::new([5, 4, 3], [1.0; 3]).unwrap();
    let f = ScalarField::constant(grid, 2.0);
    let s = VolumeSeries::new(1.0, vec![f.clone(), f]).unwrap();
    let a = add_rician_noise(&s, 0.1, 9, NoiseScale::FrameMax).unwrap();
    let b = add_rician_noise(&s, 0.1, 9, NoiseScale::FrameMax).unwrap();
    let c = add_rician_noise(&s, 0.1, 10, NoiseScale::FrameMax).unwrap();
    assert_eq!(a.frames()[0].as_slice(), b.frames()[0].as_slice());
    assert_ne!(a.frames()[0].as_slice(), a.frames()[1].as_slice());
    assert_ne!(a.frames()[0].as_slice(), c.frames()[0].as_slice());
}
