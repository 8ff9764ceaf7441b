mod common;

use common::{directional_check, grad_instance};
use pdeflow::solver::TransportMode;

#[test]
fn reverse_sweep_matches_finite_differences_in_every_mode() {
    for (seed, mode) in [
        (1, TransportMode::AdvectionDiffusion),
        (2, TransportMode::AdvectionOnly),
        (3, TransportMode::DiffusionOnly),
    ] {
        for dirichlet in [false, true] {
            let inst = grad_instance(seed, mode, dirichlet);
            let err = directional_check(&inst, 4, 1e-5, seed);
            assert!(err < 1e-6, "{mode:?} dirichlet={dirichlet}: rel err {err:e}");
        }
    }
}

#[test]
fn substepping_matches_the_finer_step_and_keeps_gradients_exact() {
    use pdeflow::loss::Objective;
    use pdeflow::Error;

    let mut inst = grad_instance(7, TransportMode::AdvectionDiffusion, false);
    // steepen the potentials until one 0.1 s step per frame is unstable
    inst.params.potentials.gamma1 = inst.params.potentials.gamma1.scaled(5.0);
    inst.cfg.solver.dt = 0.1;
    let strict = Objective::new(&inst.mask, inst.cfg).unwrap();
    assert!(matches!(strict.evaluate(&inst.sample, &inst.params), Err(Error::Cfl { .. })));

    inst.cfg.max_substeps = 4;
    let relaxed = Objective::new(&inst.mask, inst.cfg).unwrap();
    let coarse = relaxed.evaluate(&inst.sample, &inst.params).unwrap().loss.total;
    let mut fine_cfg = inst.cfg;
    fine_cfg.max_substeps = 1;
    let mut matched = false;
    for sub in 2..=4 {
        fine_cfg.solver.dt = 0.1 / sub as f64;
        let fine = Objective::new(&inst.mask, fine_cfg).unwrap();
        if let Ok(e) = fine.evaluate(&inst.sample, &inst.params) {
            assert_eq!(e.loss.total, coarse);
            matched = true;
            break;
        }
    }
    assert!(matched, "no sub-step count up to 4 was stable");
    let err = directional_check(&inst, 4, 1e-5, 7);
    assert!(err < 1e-6, "rel err {err:e}");
}
