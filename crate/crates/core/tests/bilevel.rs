//! Bilevel-scheme properties on a small 1D problem: with a surrogate
//! pre-trained to a small relative error and zero inner steps, the joint
//! algorithm's alpha trajectory tracks the solver-based one under shared
//! seeds, and the loss gap obeys the metric triangle bound.

use priorflow_core::calib::{
    eval_j2, eval_j3, BilevelConfig, CalibContext, IterSeeds, LossConfig, LrSchedule,
    OptimState, OptimizerConfig, RegularizerConfig,
};
use priorflow_core::fem::{generate_dataset, SolveOptions};
use priorflow_core::measure::{sample_sphere, w2sq_1d};
use priorflow_core::mesh::{Dim, Mesh};
use priorflow_core::nop::{inner_loop, surrogate_rel_l2, FnoConfig, FnoContext, OperatorParams};
use priorflow_core::randfield::{NodalField, PriorSpec, SynthesisTable};

const ALPHA0: [f64; 3] = [7.0, 1.2, 1.8];

struct Setup {
    ds: priorflow_core::fem::Dataset,
    model: PriorSpec,
    loss: LossConfig,
    fno: FnoConfig,
}

fn setup() -> Setup {
    let mesh = Mesh::new_1d(17).unwrap();
    let model = PriorSpec::level_set(false, 8.0, 1.0, 2.0, 4.0, 10.0, 6, 1, Dim::One).unwrap();
    // moderate noise keeps the Γ-weighting from amplifying surrogate error
    let ds = generate_dataset(&model, 30, 8, 0.1, 10.0, mesh, 31).unwrap();
    let loss = LossConfig {
        n_s: 30,
        n_r: 8,
        n_dirs: 128,
        d_y: 8,
        regularizer: RegularizerConfig::disabled(),
        fd_delta: 1e-3,
    };
    let fno = FnoConfig {
        dim: Dim::One,
        n: 17,
        layers: 2,
        channels: 16,
        modes: 6,
    };
    Setup { ds, model, loss, fno }
}

fn pretrain(s: &Setup) -> (OperatorParams, f64) {
    let mesh = s.ds.mesh;
    let spec = s.model.with_alpha(&ALPHA0).unwrap();
    let table = SynthesisTable::new(&spec, mesh).unwrap();
    let f = NodalField::constant(mesh, s.ds.f_const);
    let ctx = FnoContext::new(s.fno).unwrap();
    let mut phi = OperatorParams::random(s.fno, 3).unwrap();
    let mut opt = OptimState::new_adam(phi.flatten(), LrSchedule::new(5e-3, 4, 4000), false);
    inner_loop(&mut phi, &mut opt, &spec, &table, &f, &ctx, 4000, 8, 5, false).unwrap();
    let err = surrogate_rel_l2(&phi, &spec, &table, &f, &ctx, 30, 9, 1e-10).unwrap();
    (phi, err)
}

#[test]
fn frozen_surrogate_tracks_solver_trajectory() {
    let s = setup();
    let (phi, surrogate_err) = pretrain(&s);
    assert!(
        surrogate_err < 0.02,
        "pre-training reached only {surrogate_err:.4} relative error"
    );

    let ctx = CalibContext::new(&s.ds, s.model.clone(), s.loss.clone(), SolveOptions::default())
        .unwrap();
    let opt = OptimizerConfig {
        lr: 0.01,
        halvings: 0,
        iters: 8,
        amsgrad: false,
        alpha0: Some(ALPHA0.to_vec()),
    };
    let master = 77;
    let t1 = priorflow_core::calib::run_algorithm1(&ctx, &opt, master).unwrap();
    let bilevel = BilevelConfig {
        fno: s.fno,
        inner_steps: 0,
        lr_phi: 1e-3,
        amsgrad_phi: false,
        fixed_pool: false,
        warm_start: true,
    };
    let (t2, _) = priorflow_core::calib::run_algorithm2_with_phi(
        &ctx,
        &opt,
        &bilevel,
        master,
        Some(phi),
    )
    .unwrap();

    for (r1, r2) in t1.rows.iter().zip(&t2.rows) {
        for (a, b) in r1.alpha.iter().zip(&r2.alpha) {
            let gap = (a.ln() - b.ln()).abs();
            assert!(
                gap < 0.05,
                "iteration {}: solver alpha {a} vs surrogate alpha {b} (log gap {gap:.4})",
                r1.iter
            );
        }
    }
}

#[test]
fn loss_gap_obeys_triangle_bound() {
    let s = setup();
    let (phi, _) = pretrain(&s);
    let ctx = CalibContext::new(&s.ds, s.model.clone(), s.loss.clone(), SolveOptions::default())
        .unwrap();
    let fno_ctx = FnoContext::new(s.fno).unwrap();
    let seeds = IterSeeds::derive(55, 1);

    let p2 = eval_j2(&ctx, &ALPHA0, &seeds).unwrap();
    let p3 = eval_j3(&ctx, &ALPHA0, &phi, &fno_ctx, &seeds).unwrap();

    // D = sqrt(mean over directions of W2² between the two simulated
    // projections); the sliced distance is a metric per slice, so
    // |sqrt(sw3) - sqrt(sw2)| <= D up to Monte Carlo summation order
    let sim2 = ctx.simulate_batch_solver(&ALPHA0, &seeds).unwrap();
    let sim3 = ctx
        .simulate_batch_operator(&ALPHA0, &phi, &fno_ctx, &seeds)
        .unwrap();
    let dirs = sample_sphere(s.loss.d_y, s.loss.n_dirs, seeds.dirs).unwrap();
    let mut acc = 0.0;
    for t in 0..dirs.n_dirs {
        let theta = dirs.row(t);
        let proj = |b: &priorflow_core::measure::EmpiricalBatch| -> Vec<f64> {
            (0..b.m)
                .map(|i| {
                    b.row(i)
                        .iter()
                        .zip(theta)
                        .map(|(x, t)| x * t / ctx.dataset.gamma_std)
                        .sum()
                })
                .collect()
        };
        acc += w2sq_1d(&proj(&sim2), &proj(&sim3)).unwrap();
    }
    let d_bound = (acc / dirs.n_dirs as f64).sqrt();

    let half_dy = 0.5 * s.loss.d_y as f64;
    let gap = ((p3.sw / half_dy).sqrt() - (p2.sw / half_dy).sqrt()).abs();
    assert!(
        gap <= d_bound * (1.0 + 1e-9) + 1e-12,
        "sliced loss gap {gap:.6} exceeds surrogate distance bound {d_bound:.6}"
    );
}
