//! Command-line driver. Subcommands map onto the library modules; all
//! randomness flows from one seed through named substreams, every output is
//! reproducible from the effective config written next to it.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use nora::bench::{
    emit_csv, emit_markdown, mean_ratio_for_scale, run_bench, BenchShape, Precision,
    DEFAULT_SHAPES,
};
use nora::config::Config;
use nora::error::{Error, Result};
use nora::exec::Execution;
use nora::geometry::{newton_schulz, row_normalize, row_perp_project};
use nora::harness::{
    audit_text, compare_markdown, compare_optimizers, default_compare_entries, lemma_audit,
    record_nora_trajectory, records_csv, scaling_csv, scaling_experiment, scaling_text, train,
    RunConfig, Schedule,
};
use nora::matrix::Matrix;
use nora::model::{grad_check, LayerSpec, Mlp};
use nora::optim::{apply_step, Hyper, OptState, Variant};
use nora::rng::Rng;
use nora::tasks::{ProbeDirection, TaskKind, TaskSpec};

#[derive(Parser)]
#[command(name = "nora", about = "Row-geometric optimizer toolkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Configuration file (flat key = value with [section] headers).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed; overrides `run.seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (env NORA_OUT_DIR, default ./out).
    #[arg(long, env = "NORA_OUT_DIR", default_value = "out")]
    out_dir: PathBuf,
    /// Override a config value, e.g. --set run.steps=500 (repeatable).
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Force sequential execution of parallel sweeps.
    #[arg(long)]
    sequential: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run the invariant, lemma, and gradient property suite.
    Check(Common),
    /// Train on a synthetic task and write the metrics CSV.
    Train(Common),
    /// Measure the width-scaling exponent of the update.
    Scale(Common),
    /// Audit the update-geometry identities along a live trajectory.
    Audit(Common),
    /// Time row normalization against Newton-Schulz(5) on reference shapes.
    Bench(Common),
    /// Grid-search the optimizer family on the mixture task.
    Compare(Common),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Check(c) => cmd_check(c),
        Command::Train(c) => cmd_train(c),
        Command::Scale(c) => cmd_scale(c),
        Command::Audit(c) => cmd_audit(c),
        Command::Bench(c) => cmd_bench(c),
        Command::Compare(c) => cmd_compare(c),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(common: &Common) -> Result<Config> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)?;
            Config::parse(&text)?
        }
        None => Config::default(),
    };
    cfg.apply_overrides(&common.overrides)?;
    Ok(cfg)
}

fn resolve_seed(common: &Common, cfg: &Config) -> Result<u64> {
    match common.seed {
        Some(s) => {
            let _ = cfg.get("run.seed"); // CLI wins; mark as consumed
            Ok(s)
        }
        None => cfg.get_u64("run.seed", 7),
    }
}

fn execution_mode(common: &Common) -> Execution {
    if common.sequential {
        Execution::Sequential
    } else {
        Execution::default_mode()
    }
}

fn write_out(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    fs::write(&path, contents)?;
    Ok(path)
}

fn schedule_from(cfg: &Config) -> Result<Schedule> {
    match cfg.get_str("run.schedule", "constant").as_str() {
        "constant" => Ok(Schedule::Constant),
        "cosine_warmup" => Ok(Schedule::CosineWarmup {
            warmup_steps: cfg.get_usize("run.warmup_steps", 10)?,
        }),
        other => Err(Error::invalid(format!("unknown schedule '{other}'"))),
    }
}

fn run_config_from(cfg: &Config, seed: u64) -> Result<RunConfig> {
    let kind = TaskKind::parse(&cfg.get_str("task.kind", "sphere_align"))?;
    let mut rc = match kind {
        TaskKind::SphereAlign => RunConfig::sphere_align_default(seed),
        TaskKind::GaussMix => RunConfig::gauss_mix_default(seed),
        TaskKind::MupProbe => return Err(Error::invalid("use the scale subcommand for probes")),
    };
    rc.task.seed = seed;
    rc.task.m = cfg.get_usize("task.m", rc.task.m)?;
    rc.task.n = cfg.get_usize("task.n", rc.task.n)?;
    rc.task.classes = cfg.get_usize("task.classes", rc.task.classes)?;
    rc.task.noise = cfg.get_f64("task.noise", rc.task.noise)?;
    rc.task.train_size = cfg.get_usize("task.train_size", rc.task.train_size)?;
    rc.task.val_size = cfg.get_usize("task.val_size", rc.task.val_size)?;

    let variant = Variant::parse(&cfg.get_str("optimizer.variant", rc.hyper.variant.name()))?;
    let mut hyper = Hyper::new(variant, cfg.get_f64("optimizer.lr", rc.hyper.lr)?);
    hyper.momentum = cfg.get_f64("optimizer.momentum", hyper.momentum)?;
    hyper.weight_decay = cfg.get_f64("optimizer.weight_decay", hyper.weight_decay)?;
    hyper.ns_iters = cfg.get_usize("optimizer.ns_iters", hyper.ns_iters)?;
    rc.hyper = hyper;

    rc.steps = cfg.get_usize("run.steps", rc.steps)?;
    rc.eval_every = cfg.get_usize("run.eval_every", rc.eval_every)?;
    rc.batch_size = cfg.get_usize("run.batch_size", rc.batch_size)?;
    rc.hidden_dim = cfg.get_usize("run.hidden_dim", rc.hidden_dim)?;
    rc.schedule = schedule_from(cfg)?;
    Ok(rc)
}

/// The resolved settings written next to outputs; re-running from this file
/// reproduces everything except wall-clock fields bitwise.
fn effective_config(rc: &RunConfig) -> Config {
    let mut out = Config::default();
    out.set("task.kind", rc.task.kind.name());
    out.set("task.m", rc.task.m);
    out.set("task.n", rc.task.n);
    out.set("task.classes", rc.task.classes);
    out.set("task.noise", rc.task.noise);
    out.set("task.train_size", rc.task.train_size);
    out.set("task.val_size", rc.task.val_size);
    out.set("optimizer.variant", rc.hyper.variant.name());
    out.set("optimizer.lr", rc.hyper.lr);
    out.set("optimizer.momentum", rc.hyper.momentum);
    out.set("optimizer.weight_decay", rc.hyper.weight_decay);
    out.set("optimizer.ns_iters", rc.hyper.ns_iters);
    out.set("run.seed", rc.seed);
    out.set("run.steps", rc.steps);
    out.set("run.eval_every", rc.eval_every);
    out.set("run.batch_size", rc.batch_size);
    out.set("run.hidden_dim", rc.hidden_dim);
    out.set("run.schedule", rc.schedule.name());
    if let Schedule::CosineWarmup { warmup_steps } = rc.schedule {
        out.set("run.warmup_steps", warmup_steps);
    }
    out
}

fn cmd_train(common: &Common) -> Result<ExitCode> {
    let cfg = load_config(common)?;
    let seed = resolve_seed(common, &cfg)?;
    let rc = run_config_from(&cfg, seed)?;
    cfg.reject_unknown()?;
    let outcome = train(&rc)?;
    let csv = records_csv(&outcome.records, outcome.grad_is_stochastic);
    let csv_path = write_out(&common.out_dir, "records.csv", &csv)?;
    write_out(&common.out_dir, "effective.conf", &effective_config(&rc).serialize())?;
    if let Some(diag) = &outcome.diagnostic {
        eprintln!("run diverged: {diag}");
        println!("records written to {}", csv_path.display());
        return Ok(ExitCode::FAILURE);
    }
    let first = outcome.initial();
    let last = outcome.last();
    println!(
        "task {} steps {}: loss {:.6} -> {:.6}, proj grad (1,2) {:.6} -> {:.6}",
        rc.task.kind.name(),
        rc.steps,
        first.loss,
        last.loss,
        first.proj_grad_12,
        last.proj_grad_12
    );
    if let (Some(base), Some(val)) = (outcome.baseline_val_loss, outcome.val_loss) {
        println!("validation loss: {val:.6} (untrained baseline {base:.6})");
    }
    println!("records written to {}", csv_path.display());
    Ok(ExitCode::SUCCESS)
}

fn parse_widths(spec: &str) -> Result<Vec<usize>> {
    spec.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::invalid(format!("bad width '{s}'")))
        })
        .collect()
}

fn cmd_scale(common: &Common) -> Result<ExitCode> {
    let cfg = load_config(common)?;
    let seed = resolve_seed(common, &cfg)?;
    let widths = parse_widths(&cfg.get_str("scale.widths", "256,512,1024,2048,4096,8192,16384"))?;
    let seed_count = cfg.get_usize("scale.seeds", 32)?;
    let rows = cfg.get_usize("scale.rows", 4)?;
    let sigma_w = cfg.get_f64("scale.sigma_w", 1.0)?;
    let sigma_x = cfg.get_f64("scale.sigma_x", 1.0)?;
    let direction = match cfg.get_str("scale.direction", "nora").as_str() {
        "nora" => ProbeDirection::Nora,
        "rmnp" => ProbeDirection::Rmnp,
        "zero" => ProbeDirection::Zero,
        other => return Err(Error::invalid(format!("unknown direction '{other}'"))),
    };
    cfg.reject_unknown()?;
    let seeds: Vec<u64> = (0..seed_count as u64).map(|i| seed.wrapping_add(i)).collect();
    let report = scaling_experiment(
        &widths,
        &seeds,
        rows,
        sigma_w,
        sigma_x,
        direction,
        execution_mode(common),
    )?;
    let text = scaling_text(&report);
    print!("{text}");
    write_out(&common.out_dir, "scale.csv", &scaling_csv(&report))?;
    write_out(&common.out_dir, "scale.txt", &text)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_audit(common: &Common) -> Result<ExitCode> {
    let cfg = load_config(common)?;
    let seed = resolve_seed(common, &cfg)?;
    let mut rc = RunConfig::sphere_align_default(seed);
    rc.task = TaskSpec::sphere_align(
        cfg.get_usize("audit.m", 16)?,
        cfg.get_usize("audit.n", 64)?,
        seed,
    );
    rc.steps = cfg.get_usize("audit.steps", 500)?;
    rc.hyper = Hyper::nora(cfg.get_f64("audit.lr", 0.01)?)
        .with_momentum(cfg.get_f64("audit.momentum", 0.95)?);
    cfg.reject_unknown()?;
    let traj = record_nora_trajectory(&rc)?;
    let report = lemma_audit(&traj)?;
    let text = audit_text(&report);
    print!("{text}");
    write_out(&common.out_dir, "audit.txt", &text)?;
    Ok(if report.passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn parse_shapes(spec: &str) -> Result<Vec<BenchShape>> {
    spec.split(',')
        .map(|s| {
            let (r, c) = s
                .trim()
                .split_once('x')
                .ok_or_else(|| Error::invalid(format!("bad shape '{s}', expected RxC")))?;
            let rows = r.parse().map_err(|_| Error::invalid(format!("bad rows '{r}'")))?;
            let cols = c.parse().map_err(|_| Error::invalid(format!("bad cols '{c}'")))?;
            Ok(BenchShape { rows, cols, scale: "custom", layer: "custom" })
        })
        .collect()
}

fn cmd_bench(common: &Common) -> Result<ExitCode> {
    let cfg = load_config(common)?;
    let warmup = cfg.get_usize("bench.warmup", 3)?;
    let iters = cfg.get_usize("bench.iters", 10)?;
    let precision = Precision::parse(&cfg.get_str("bench.precision", "f32"))?;
    let shapes: Vec<BenchShape> = match cfg.get("bench.shapes") {
        Some(spec) => parse_shapes(&spec.to_string())?,
        None => DEFAULT_SHAPES.to_vec(),
    };
    cfg.reject_unknown()?;
    let results = run_bench(&shapes, warmup, iters, precision)?;
    let md = emit_markdown(&results)?;
    print!("{md}");
    if let (Some(small), Some(large)) = (
        mean_ratio_for_scale(&results, "60M"),
        mean_ratio_for_scale(&results, "1B"),
    ) {
        println!("\nmean NS/row-norm ratio: 60M shapes {small:.2}x, 1B shapes {large:.2}x");
    }
    write_out(&common.out_dir, "bench.md", &md)?;
    write_out(&common.out_dir, "bench.csv", &emit_csv(&results)?)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_compare(common: &Common) -> Result<ExitCode> {
    let cfg = load_config(common)?;
    let seed = resolve_seed(common, &cfg)?;
    let mut rc = RunConfig::gauss_mix_default(seed);
    rc.steps = cfg.get_usize("run.steps", rc.steps)?;
    rc.batch_size = cfg.get_usize("run.batch_size", rc.batch_size)?;
    rc.hidden_dim = cfg.get_usize("run.hidden_dim", rc.hidden_dim)?;
    rc.task.train_size = cfg.get_usize("task.train_size", rc.task.train_size)?;
    rc.task.val_size = cfg.get_usize("task.val_size", rc.task.val_size)?;
    cfg.reject_unknown()?;
    let report = compare_optimizers(&rc, &default_compare_entries(), execution_mode(common))?;
    let md = compare_markdown(&report);
    print!("{md}");
    write_out(&common.out_dir, "compare.md", &md)?;
    Ok(ExitCode::SUCCESS)
}

struct CheckCtx {
    failures: Vec<String>,
}

impl CheckCtx {
    fn report(&mut self, name: &str, outcome: std::result::Result<(), String>) {
        match outcome {
            Ok(()) => println!("PASS {name}"),
            Err(msg) => {
                println!("FAIL {name}: {msg}");
                self.failures.push(name.to_string());
            }
        }
    }
}

fn cmd_check(common: &Common) -> Result<ExitCode> {
    let cfg = load_config(common)?;
    let seed = resolve_seed(common, &cfg)?;
    cfg.reject_unknown()?;
    let mut ctx = CheckCtx { failures: Vec::new() };

    ctx.report("direction row orthogonality", check_orthogonality(seed));
    ctx.report("pythagorean row-norm growth", check_pythagorean(seed));
    ctx.report("update-geometry audit", check_audit(seed));
    ctx.report("analytic gradients vs finite differences", check_gradients(seed));
    ctx.report("newton-schulz scalar recursion", check_newton_schulz());
    ctx.report("row normalization geometry", check_row_norm_geometry(seed));
    ctx.report("training determinism", check_determinism(seed));

    if ctx.failures.is_empty() {
        println!("all checks passed");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("{} check(s) failed; first failure: {}", ctx.failures.len(), ctx.failures[0]);
        Ok(ExitCode::FAILURE)
    }
}

fn check_orthogonality(seed: u64) -> std::result::Result<(), String> {
    let mut rng = Rng::from_seed(seed).substream("check/orth");
    for trial in 0..200 {
        let m = 1 + rng.index(16);
        let n = 1 + rng.index(16);
        let mut w = Matrix::random_normal(m, n, 1.0, &mut rng);
        let mut state = OptState::new(m, n);
        let hyper = Hyper::nora(0.05).with_momentum(0.9);
        for step in 0..5 {
            let g = Matrix::random_normal(m, n, 1.0, &mut rng);
            let before = w.clone();
            apply_step(&mut w, &g, &hyper, &mut state).map_err(|e| e.to_string())?;
            let delta = w.sub(&before).map_err(|e| e.to_string())?;
            let dots = delta.row_dot(&before).map_err(|e| e.to_string())?;
            for (i, (&dw, wn)) in dots.iter().zip(before.row_norms()).enumerate() {
                if dw.abs() > 1e-10 * wn.max(1.0) * hyper.lr {
                    return Err(format!(
                        "trial {trial} step {step} row {i}: <step, w> = {dw:.3e}"
                    ));
                }
            }
        }
    }
    Ok(())
}

fn check_pythagorean(seed: u64) -> std::result::Result<(), String> {
    let mut rng = Rng::from_seed(seed).substream("check/pyth");
    for trial in 0..100 {
        let m = 1 + rng.index(12);
        let n = 1 + rng.index(12);
        let mut w = Matrix::random_normal(m, n, 1.0, &mut rng);
        let mut state = OptState::new(m, n);
        let hyper = Hyper::nora(0.05).with_momentum(0.9);
        for _ in 0..5 {
            let g = Matrix::random_normal(m, n, 1.0, &mut rng);
            let before_norms = w.row_norms();
            let before = w.clone();
            apply_step(&mut w, &g, &hyper, &mut state).map_err(|e| e.to_string())?;
            let delta = w.sub(&before).map_err(|e| e.to_string())?;
            for (i, (&b, a)) in before_norms.iter().zip(w.row_norms()).enumerate() {
                let moved = delta.row(i).iter().any(|&v| v != 0.0);
                let expect = if moved { hyper.lr * hyper.lr } else { 0.0 };
                let got = a * a - b * b;
                if (got - expect).abs() > 1e-10 {
                    return Err(format!("trial {trial} row {i}: growth {got:.3e} vs {expect:.3e}"));
                }
            }
        }
    }
    Ok(())
}

fn check_audit(seed: u64) -> std::result::Result<(), String> {
    let mut rc = RunConfig::sphere_align_default(seed);
    rc.task = TaskSpec::sphere_align(16, 48, seed);
    rc.steps = 100;
    let traj = record_nora_trajectory(&rc).map_err(|e| e.to_string())?;
    let report = lemma_audit(&traj).map_err(|e| e.to_string())?;
    if report.passed {
        Ok(())
    } else {
        Err(report.failures[0].clone())
    }
}

fn check_gradients(seed: u64) -> std::result::Result<(), String> {
    let mut rng = Rng::from_seed(seed).substream("check/grad");
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
    .map_err(|e| e.to_string())?;
    let x = Matrix::random_normal(8, 16, 1.0, &mut rng);
    let labels: Vec<usize> = (0..8).map(|i| i % 4).collect();
    let report = grad_check(&mut model, &x, &labels, 1e-5).map_err(|e| e.to_string())?;
    if report.max_rel_error <= 1e-6 {
        Ok(())
    } else {
        Err(format!("max relative error {:.3e}", report.max_rel_error))
    }
}

fn check_newton_schulz() -> std::result::Result<(), String> {
    // Diagonal input follows the scalar recursion s <- s (3 - s^2) / 2,
    // which converges to 1 from anywhere in (0, sqrt(3)).
    let x = Matrix::from_fn(6, 6, |i, j| if i == j { 0.2 + 0.1 * i as f64 } else { 0.0 });
    let out = newton_schulz(&x, 15);
    for i in 0..6 {
        let mut s = 0.2 + 0.1 * i as f64;
        for _ in 0..15 {
            s = 0.5 * s * (3.0 - s * s);
        }
        let got = out.at(i, i);
        if (got - s).abs() > 1e-9 {
            return Err(format!("diagonal {i}: {got} vs scalar recursion {s}"));
        }
        if (got - 1.0).abs() > 1e-6 {
            return Err(format!("diagonal {i}: {got} did not converge to 1"));
        }
    }
    Ok(())
}

fn check_row_norm_geometry(seed: u64) -> std::result::Result<(), String> {
    let mut rng = Rng::from_seed(seed).substream("check/rn");
    for trial in 0..200 {
        let m = 1 + rng.index(8);
        let n = 1 + rng.index(8);
        let x = Matrix::random_normal(m, n, 1.0, &mut rng);
        let w = Matrix::random_normal(m, n, 1.0, &mut rng);
        let p = row_perp_project(&x, &w).map_err(|e| e.to_string())?;
        if p.norm_fro() > x.norm_fro() * (1.0 + 1e-12) {
            return Err(format!("trial {trial}: projection expanded the F norm"));
        }
        let d = row_normalize(&p, 0.0);
        let dual = p.inner(&d).map_err(|e| e.to_string())?;
        if (dual - p.norm_12()).abs() > 1e-10 * p.norm_12().max(1.0) {
            return Err(format!("trial {trial}: duality identity violated"));
        }
        // Idempotence: normalizing twice changes nothing beyond rounding.
        let dd = row_normalize(&d, 0.0);
        let drift = dd.sub(&d).map_err(|e| e.to_string())?.norm_fro();
        if drift > 1e-12 * d.norm_fro().max(1.0) {
            return Err(format!("trial {trial}: normalization not idempotent"));
        }
    }
    Ok(())
}

fn check_determinism(seed: u64) -> std::result::Result<(), String> {
    let mut rc = RunConfig::sphere_align_default(seed);
    rc.task = TaskSpec::sphere_align(8, 32, seed);
    rc.steps = 50;
    rc.eval_every = 10;
    let a = train(&rc).map_err(|e| e.to_string())?;
    let b = train(&rc).map_err(|e| e.to_string())?;
    if a.records.len() != b.records.len() {
        return Err("record counts differ".into());
    }
    for (x, y) in a.records.iter().zip(&b.records) {
        if x.loss.to_bits() != y.loss.to_bits()
            || x.proj_grad_12.to_bits() != y.proj_grad_12.to_bits()
        {
            return Err(format!("step {} differs between runs", x.step));
        }
    }
    Ok(())
}
