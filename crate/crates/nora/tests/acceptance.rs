//! Acceptance gate: ten end-to-end criteria with pinned tolerances. Each
//! test prints a single PASS line on success; failures carry the measured
//! value so the report stands on its own.

use nalgebra::DMatrix;

use nora::bench::{mean_ratio_for_scale, ratio_for_shape, run_bench, Method, Precision, DEFAULT_SHAPES};
use nora::exec::Execution;
use nora::geometry::newton_schulz;
use nora::harness::{
    compare_optimizers, default_compare_entries, lemma_audit, record_nora_trajectory, train,
    RunConfig, scaling_experiment,
};
use nora::matrix::{dot, Matrix};
use nora::model::{grad_check, LayerSpec, Mlp};
use nora::optim::{apply_step, nora_direction, Hyper, OptState};
use nora::rng::Rng;
use nora::tasks::{random_unit_rows, sphere_align_loss_grad, ProbeDirection, TaskSpec};

fn pass(n: usize, name: &str, detail: String) {
    println!("ACCEPTANCE {n} PASS: {name} ({detail})");
}

/// Shared driver for criteria 1 and 2: 1000 canonical steps over random
/// shapes up to 64 x 64, zero decay, checking per-row orthogonality of the
/// update and the exact Pythagorean norm growth.
fn random_step_suite(check: impl Fn(usize, &Matrix, &Matrix, f64)) {
    let mut rng = Rng::from_seed(42).substream("acceptance/steps");
    let mut steps_done = 0usize;
    while steps_done < 1000 {
        let m = 1 + rng.index(64);
        let n = 1 + rng.index(64);
        let mut w = Matrix::random_normal(m, n, 1.0, &mut rng);
        let mut state = OptState::new(m, n);
        let hyper = Hyper::nora(0.05).with_momentum(0.9);
        for _ in 0..5 {
            let g = Matrix::random_normal(m, n, 1.0, &mut rng);
            let before = w.clone();
            apply_step(&mut w, &g, &hyper, &mut state).unwrap();
            check(steps_done, &before, &w, hyper.lr);
            steps_done += 1;
        }
    }
}

#[test]
fn criterion_01_orthogonality_suite() {
    let start = std::time::Instant::now();
    let mut worst: f64 = 0.0;
    let worst_cell = std::cell::Cell::new(0.0f64);
    random_step_suite(|step, before, after, _lr| {
        let delta = after.sub(before).unwrap();
        let dots = delta.row_dot(before).unwrap();
        for (i, (&dw, wn)) in dots.iter().zip(before.row_norms()).enumerate() {
            let scaled = dw.abs() / wn.max(1.0);
            worst_cell.set(worst_cell.get().max(scaled));
            assert!(
                scaled <= 1e-10,
                "step {step} row {i}: |<d, w>| scaled = {scaled:.3e}"
            );
        }
    });
    worst = worst.max(worst_cell.get());
    assert!(start.elapsed().as_secs() < 10, "orthogonality suite exceeded 10 s");
    pass(1, "update rows orthogonal to weight rows over 1000 steps",
         format!("max scaled |<d,w>| = {worst:.3e}"));
}

#[test]
fn criterion_02_pythagorean_growth() {
    let worst = std::cell::Cell::new(0.0f64);
    random_step_suite(|step, before, after, lr| {
        let delta = after.sub(before).unwrap();
        for i in 0..before.rows() {
            let moved = delta.row(i).iter().any(|&v| v != 0.0);
            let expect = if moved { lr * lr } else { 0.0 };
            let b = dot(before.row(i), before.row(i));
            let a = dot(after.row(i), after.row(i));
            let err = ((a - b) - expect).abs();
            worst.set(worst.get().max(err));
            assert!(err <= 1e-10, "step {step} row {i}: growth error {err:.3e}");
        }
    });
    pass(2, "squared row-norm growth equals lr^2 per moved row",
         format!("max error = {:.3e}", worst.get()));
}

#[test]
fn criterion_03_lemma_audit_500_steps() {
    let mut cfg = RunConfig::sphere_align_default(42);
    cfg.task = TaskSpec::sphere_align(16, 64, 42);
    cfg.steps = 500;
    let traj = record_nora_trajectory(&cfg).unwrap();
    assert_eq!(traj.len(), 500);
    let report = lemma_audit(&traj).unwrap();
    assert!(report.max_dual_identity_rel <= 1e-10, "duality identity: {:.3e}", report.max_dual_identity_rel);
    assert!(report.max_d_fro_excess <= 1e-12, "||d||_F cap: {:.3e}", report.max_d_fro_excess);
    assert!(report.max_d_inf2_excess <= 1e-12, "||d||_inf2 cap: {:.3e}", report.max_d_inf2_excess);
    assert!(report.max_expansion <= 1e-12, "non-expansiveness: {:.3e}", report.max_expansion);
    assert!(report.min_lower_bound_slack >= -1e-9, "lower bound slack: {:.3e}", report.min_lower_bound_slack);
    assert!(report.passed, "audit failures: {:?}", report.failures);
    pass(3, "500-step audit of the update-geometry identities",
         format!("min lower-bound slack = {:.3e}", report.min_lower_bound_slack));
}

#[test]
fn criterion_04_gradient_correctness() {
    let mut rng = Rng::from_seed(42).substream("acceptance/grad");
    let mut model = Mlp::new(
        &[
            LayerSpec::Dense { in_dim: 16, out_dim: 32 },
            LayerSpec::RmsNorm { dim: 32, has_gain: true },
            LayerSpec::Relu,
            LayerSpec::Dense { in_dim: 32, out_dim: 4 },
            LayerSpec::SoftmaxCe { classes: 4 },
        ],
        1.0,
        0.0,
        &mut rng,
    )
    .unwrap();
    let x = Matrix::random_normal(8, 16, 1.0, &mut rng);
    let labels: Vec<usize> = (0..8).map(|i| i % 4).collect();
    let report = grad_check(&mut model, &x, &labels, 1e-5).unwrap();
    assert!(
        report.max_rel_error <= 1e-6,
        "max relative error {:.3e}",
        report.max_rel_error
    );
    pass(4, "manual backprop matches central finite differences",
         format!("max relative error = {:.3e}", report.max_rel_error));
}

#[test]
fn criterion_05_row_scale_invariance() {
    let mut rng = Rng::from_seed(42).substream("acceptance/inv");

    // Part 1: sphere_align.
    let targets = random_unit_rows(12, 24, &mut rng);
    let w = Matrix::random_normal(12, 24, 1.0, &mut rng);
    let (loss, grad) = sphere_align_loss_grad(&w, &targets).unwrap();
    for i in 0..12 {
        let ip = dot(grad.row(i), w.row(i)).abs();
        let gn = dot(grad.row(i), grad.row(i)).sqrt();
        let wn = dot(w.row(i), w.row(i)).sqrt();
        assert!(ip <= 1e-8 * gn * wn, "sphere row {i}: <grad, w> = {ip:.3e}");
    }
    let d_entries: Vec<f64> = (0..12).map(|_| rng.uniform_in(0.1, 10.0)).collect();
    let scaled = Matrix::from_fn(12, 24, |i, j| d_entries[i] * w.at(i, j));
    let (loss_s, grad_s) = sphere_align_loss_grad(&scaled, &targets).unwrap();
    let rel = (loss_s - loss).abs() / loss.abs().max(1.0);
    assert!(rel <= 1e-10, "sphere loss changed by {rel:.3e} under row scaling");

    // Single-step direction at beta = 0 is invariant under the same D.
    let (_, dir, _) = nora_direction(&grad, &w, 0.0).unwrap();
    let (_, dir_s, _) = nora_direction(&grad_s, &scaled, 0.0).unwrap();
    let mut max_dir_diff: f64 = 0.0;
    for (a, b) in dir.data().iter().zip(dir_s.data()) {
        max_dir_diff = max_dir_diff.max((a - b).abs());
    }
    assert!(max_dir_diff <= 1e-8, "direction moved {max_dir_diff:.3e} under row scaling");

    // Part 2: a dense weight feeding a batch RMS normalization.
    let mut model = Mlp::new(
        &[
            LayerSpec::Dense { in_dim: 10, out_dim: 14 },
            LayerSpec::RmsNorm { dim: 14, has_gain: false },
            LayerSpec::Relu,
            LayerSpec::Dense { in_dim: 14, out_dim: 4 },
            LayerSpec::SoftmaxCe { classes: 4 },
        ],
        1.0,
        0.0,
        &mut rng,
    )
    .unwrap();
    let x = Matrix::random_normal(16, 10, 1.0, &mut rng);
    let labels: Vec<usize> = (0..16).map(|i| i % 4).collect();
    let (loss0, tape) = model.forward(&x, &labels).unwrap();
    let grads = model.backward(&tape).unwrap();
    let params = model.params();
    let (_, w_ref, _) = params[0].clone();
    let w0 = model.param_matrix(w_ref);
    let g0 = model.param_grad_matrix(&grads, w_ref);
    for i in 0..w0.rows() {
        let ip = dot(g0.row(i), w0.row(i)).abs();
        let gn = dot(g0.row(i), g0.row(i)).sqrt();
        let wn = dot(w0.row(i), w0.row(i)).sqrt();
        assert!(ip <= 1e-8 * gn * wn, "dense row {i}: <grad, w> = {ip:.3e}");
    }
    let dm: Vec<f64> = (0..w0.rows()).map(|_| rng.uniform_in(0.1, 10.0)).collect();
    let w_scaled = Matrix::from_fn(w0.rows(), w0.cols(), |i, j| dm[i] * w0.at(i, j));
    model.set_param_matrix(w_ref, &w_scaled);
    let (loss1, tape1) = model.forward(&x, &labels).unwrap();
    let rel_model = (loss1 - loss0).abs() / loss0.abs().max(1.0);
    assert!(rel_model <= 1e-10, "model loss changed by {rel_model:.3e} under row scaling");

    // Beta = 0 direction invariance on the normalized dense weight.
    let grads1 = model.backward(&tape1).unwrap();
    let g1 = model.param_grad_matrix(&grads1, w_ref);
    let (_, dir0, _) = nora_direction(&g0, &w0, 0.0).unwrap();
    let (_, dir1, _) = nora_direction(&g1, &w_scaled, 0.0).unwrap();
    let mut max_model_dir: f64 = 0.0;
    for (a, b) in dir0.data().iter().zip(dir1.data()) {
        max_model_dir = max_model_dir.max((a - b).abs());
    }
    assert!(max_model_dir <= 1e-8, "model direction moved {max_model_dir:.3e}");

    pass(5, "row-scale invariance of the objective, gradient, and direction",
         format!("loss drift {rel:.1e} / {rel_model:.1e}, direction drift {max_dir_diff:.1e} / {max_model_dir:.1e}"));
}

#[test]
fn criterion_06_width_scaling() {
    let start = std::time::Instant::now();
    let widths = [256usize, 512, 1024, 2048, 4096, 8192, 16384];
    let seeds: Vec<u64> = (0..32).collect();
    let report = scaling_experiment(
        &widths,
        &seeds,
        4,
        1.0,
        1.0,
        ProbeDirection::Nora,
        Execution::default_mode(),
    )
    .unwrap();
    let slope = report.slope.expect("non-degenerate fit");
    assert!(
        (slope - 0.5).abs() <= 0.05,
        "fitted exponent {slope:.4} outside 0.5 +- 0.05"
    );
    let top = report.points.iter().find(|p| p.width == 16384).unwrap();
    assert!(
        (0.95..=1.05).contains(&top.normalized_mean),
        "normalized mean at 2^14 = {:.4}",
        top.normalized_mean
    );
    assert_eq!(top.sign_agreement, 1.0, "measured sign must follow the error sign");
    assert!(start.elapsed().as_secs() < 120, "width scaling exceeded 2 min");
    pass(6, "update magnitude scales like sqrt(width) with unit constant",
         format!("exponent = {slope:.4}, normalized mean at 2^14 = {:.4}", top.normalized_mean));
}

fn to_na(x: &Matrix) -> DMatrix<f64> {
    DMatrix::from_fn(x.rows(), x.cols(), |i, j| x.at(i, j))
}

fn from_na(x: &DMatrix<f64>) -> Matrix {
    Matrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)])
}

/// Random 8 x 8 matrix with prescribed singular values, built from two
/// QR-orthogonal factors.
fn with_singular_values(svals: &[f64], rng: &mut Rng) -> Matrix {
    let n = svals.len();
    let qu = to_na(&Matrix::random_normal(n, n, 1.0, rng)).qr().q();
    let qv = to_na(&Matrix::random_normal(n, n, 1.0, rng)).qr().q();
    let sigma = DMatrix::from_fn(n, n, |i, j| if i == j { svals[i] } else { 0.0 });
    from_na(&(qu * sigma * qv.transpose()))
}

#[test]
fn criterion_07_newton_schulz_vs_polar_oracle() {
    let mut rng = Rng::from_seed(42).substream("acceptance/ns");
    for trial in 0..20 {
        // NS(15) against the SVD polar factor U V^T.
        let svals: Vec<f64> = (0..8).map(|_| rng.uniform_in(0.3, 1.0)).collect();
        let x = with_singular_values(&svals, &mut rng);
        let svd = to_na(&x).svd(true, true);
        let polar = from_na(&(svd.u.clone().unwrap() * svd.v_t.clone().unwrap()));
        let ns = newton_schulz(&x, 15);
        let rel = ns.sub(&polar).unwrap().norm_fro() / polar.norm_fro();
        assert!(rel <= 0.05, "trial {trial}: NS(15) off polar factor by {rel:.4}");

        // NS(5) keeps singular values in [0.7, 1.3] for condition <= 3.
        let lo = rng.uniform_in(0.34, 0.9);
        let hi = (lo * 3.0).min(1.0);
        let svals5: Vec<f64> = (0..8).map(|_| rng.uniform_in(lo, hi)).collect();
        let x5 = with_singular_values(&svals5, &mut rng);
        let out5 = newton_schulz(&x5, 5);
        let out_svals = to_na(&out5).svd(false, false).singular_values;
        for s in out_svals.iter() {
            assert!(
                (0.7..=1.3).contains(s),
                "trial {trial}: NS(5) singular value {s:.4} outside [0.7, 1.3]"
            );
        }
    }
    pass(7, "Newton-Schulz matches the SVD polar oracle", "20 random 8x8 trials".to_string());
}

#[test]
fn criterion_08_convergence_regression() {
    let start = std::time::Instant::now();
    let cfg = RunConfig::sphere_align_default(7);
    assert_eq!((cfg.hyper.lr, cfg.hyper.momentum, cfg.steps), (0.01, 0.95, 2000));
    assert_eq!((cfg.task.m, cfg.task.n), (64, 256));
    let out = train(&cfg).unwrap();
    assert!(!out.diverged);
    let m = cfg.task.m as f64;
    let initial = out.initial().proj_grad_12 / m;
    let final_ = out.last().proj_grad_12 / m;
    assert!(
        final_ < 0.1 * initial,
        "mean projected gradient {final_:.6} not below 10% of initial {initial:.6}"
    );
    assert!(start.elapsed().as_secs() < 30, "convergence run exceeded 30 s");
    pass(8, "fixed-seed convergence on the alignment task",
         format!("projected gradient fell to {:.2}% of initial", 100.0 * final_ / initial));
}

#[test]
fn criterion_09_kernel_benchmark() {
    let start = std::time::Instant::now();
    let results = run_bench(&DEFAULT_SHAPES, 2, 10, Precision::F32).unwrap();
    for r in results.iter().filter(|r| r.method == Method::Ns5) {
        assert!(
            r.ratio_vs_rownorm > 1.0,
            "{} x {}: row normalization not faster (ratio {:.3})",
            r.rows, r.cols, r.ratio_vs_rownorm
        );
    }
    let big = ratio_for_shape(&results, 2048, 5461).unwrap();
    assert!(big >= 10.0, "2048 x 5461 ratio {big:.2} below 10");
    let small_mean = mean_ratio_for_scale(&results, "60M").unwrap();
    let large_mean = mean_ratio_for_scale(&results, "1B").unwrap();
    assert!(
        large_mean > small_mean,
        "1B mean ratio {large_mean:.2} not above 60M mean ratio {small_mean:.2}"
    );
    assert!(start.elapsed().as_secs() < 300, "benchmark exceeded 5 min");
    pass(9, "row normalization beats NS(5) on all 12 shapes",
         format!("2048x5461 ratio {big:.1}x, scale means {small_mean:.1}x -> {large_mean:.1}x"));
}

#[test]
fn criterion_10_optimizer_demo() {
    let cfg = RunConfig::gauss_mix_default(7);
    let entries = default_compare_entries();
    let report = compare_optimizers(&cfg, &entries, Execution::default_mode()).unwrap();
    let markdown = nora::harness::compare_markdown(&report);
    assert!(markdown.contains("| Optimizer |"), "markdown report emitted");
    println!("{markdown}");
    let mut reductions = Vec::new();
    for name in ["nora", "rmnp", "mano", "muon"] {
        let row = report
            .rows
            .iter()
            .find(|r| r.label == name)
            .unwrap_or_else(|| panic!("missing row for {name}"));
        assert!(
            row.reduction >= 0.5,
            "{name} reduced validation loss by only {:.1}%",
            100.0 * row.reduction
        );
        reductions.push(format!("{name} {:.0}%", 100.0 * row.reduction));
    }
    // The decay ablation rows are both present.
    assert!(report.rows.iter().any(|r| r.label.contains("decay") && r.weight_decay == 0.1));
    pass(10, "matrix optimizer family halves validation loss on the mixture task",
         reductions.join(", "));
}
