//! Experiment drivers: training loops with metric capture, the width
//! scaling experiment, the per-step lemma audit on live trajectories, and
//! the optimizer comparison grid.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::exec::{map_indexed, Execution};
use crate::geometry::row_perp_project;
use crate::matrix::Matrix;
use crate::model::{LayerSpec, Mlp};
use crate::optim::{nora_direction, route_params, Hyper, ParamDef, ParamGroup, Variant};
use crate::rng::Rng;
use crate::tasks::{
    gauss_mix_generate, mup_probe, random_unit_rows, sphere_align_loss_grad, Dataset,
    ProbeDirection, TaskKind, TaskSpec,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    Constant,
    /// Linear warmup to the base rate, then cosine decay to zero.
    CosineWarmup { warmup_steps: usize },
}

impl Schedule {
    pub fn lr_at(&self, base: f64, step: usize, total: usize) -> f64 {
        match *self {
            Schedule::Constant => base,
            Schedule::CosineWarmup { warmup_steps } => {
                if step < warmup_steps {
                    base * (step + 1) as f64 / warmup_steps as f64
                } else if total <= warmup_steps {
                    base
                } else {
                    let progress =
                        (step - warmup_steps) as f64 / (total - warmup_steps) as f64;
                    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
                }
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Schedule::Constant => "constant",
            Schedule::CosineWarmup { .. } => "cosine_warmup",
        }
    }
}

/// One metrics row. `proj_grad_12` is the (1,2)-norm of the row-projected
/// gradient; on minibatch tasks it is a stochastic estimate and the CSV
/// header says so.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub step: usize,
    pub loss: f64,
    pub proj_grad_12: f64,
    pub row_norm_min: f64,
    pub row_norm_max: f64,
    pub row_norm_mean: f64,
    pub wall_ns: u64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub task: TaskSpec,
    pub hyper: Hyper,
    pub steps: usize,
    pub schedule: Schedule,
    pub seed: u64,
    pub eval_every: usize,
    /// Minibatch size (gauss_mix only).
    pub batch_size: usize,
    /// Hidden width of the classifier MLP (gauss_mix only).
    pub hidden_dim: usize,
}

impl RunConfig {
    /// The documented desk-scale alignment run: Nora, lr 0.01, beta 0.95,
    /// 2000 steps on a 64 x 256 sphere-alignment problem.
    pub fn sphere_align_default(seed: u64) -> RunConfig {
        RunConfig {
            task: TaskSpec::sphere_align(64, 256, seed),
            hyper: Hyper::nora(0.01).with_momentum(0.95),
            steps: 2000,
            schedule: Schedule::Constant,
            seed,
            eval_every: 100,
            batch_size: 0,
            hidden_dim: 0,
        }
    }

    pub fn gauss_mix_default(seed: u64) -> RunConfig {
        RunConfig {
            task: TaskSpec::gauss_mix(seed),
            hyper: Hyper::nora(0.03).with_momentum(0.95),
            steps: 400,
            schedule: Schedule::Constant,
            seed,
            eval_every: 50,
            batch_size: 128,
            hidden_dim: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.hyper.validate()?;
        if self.eval_every < 1 {
            return Err(Error::invalid("eval_every must be >= 1"));
        }
        if let Schedule::CosineWarmup { warmup_steps } = self.schedule {
            if self.steps > 0 && warmup_steps >= self.steps {
                return Err(Error::invalid("warmup_steps must be < steps"));
            }
        }
        if self.task.kind == TaskKind::GaussMix && (self.batch_size < 1 || self.hidden_dim < 1) {
            return Err(Error::invalid("gauss_mix needs batch_size and hidden_dim"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub records: Vec<TrainRecord>,
    pub diverged: bool,
    /// Present when the run aborted; names the step and offending value.
    pub diagnostic: Option<String>,
    /// Validation loss after training (gauss_mix only).
    pub val_loss: Option<f64>,
    /// Validation loss of the untrained model (gauss_mix only).
    pub baseline_val_loss: Option<f64>,
    /// True when `proj_grad_12` comes from minibatch gradients.
    pub grad_is_stochastic: bool,
}

impl RunOutcome {
    pub fn initial(&self) -> &TrainRecord {
        &self.records[0]
    }

    pub fn last(&self) -> &TrainRecord {
        self.records.last().expect("at least the t=0 record")
    }
}

/// Initialization scale for sphere_align weights. The unit-norm update
/// turns the learning rate into an angular speed of lr / ||w_i||, so the
/// init controls how many steps a row needs to cross the sphere; 0.5 puts
/// row norms near 8 for n = 256, which converges comfortably inside the
/// default 2000-step budget.
pub const SPHERE_INIT_STD: f64 = 0.5;

pub fn train(config: &RunConfig) -> Result<RunOutcome> {
    config.validate()?;
    match config.task.kind {
        TaskKind::SphereAlign => train_sphere_align(config),
        TaskKind::GaussMix => train_gauss_mix(config),
        TaskKind::MupProbe => Err(Error::invalid("mup_probe is driven by scaling_experiment")),
    }
}

fn row_norm_stats(w: &Matrix) -> (f64, f64, f64) {
    let norms = w.row_norms();
    let min = norms.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = norms.iter().cloned().fold(0.0f64, f64::max);
    let mean = norms.iter().sum::<f64>() / norms.len() as f64;
    (min, max, mean)
}

fn train_sphere_align(config: &RunConfig) -> Result<RunOutcome> {
    let root = Rng::from_seed(config.seed);
    let (m, n) = (config.task.m, config.task.n);
    let targets = random_unit_rows(m, n, &mut root.substream("task"));
    let w0 = Matrix::random_normal(m, n, SPHERE_INIT_STD, &mut root.substream("init"));
    let mut group = ParamGroup::new("w", w0, config.hyper.clone(), true)?;
    let start = Instant::now();
    let mut records = Vec::new();
    let push_record = |step: usize, loss: f64, w: &Matrix, grad: &Matrix, lr: f64,
                           records: &mut Vec<TrainRecord>|
     -> Result<()> {
        let g_proj = row_perp_project(grad, w)?;
        let (rmin, rmax, rmean) = row_norm_stats(w);
        records.push(TrainRecord {
            step,
            loss,
            proj_grad_12: g_proj.norm_12(),
            row_norm_min: rmin,
            row_norm_max: rmax,
            row_norm_mean: rmean,
            wall_ns: start.elapsed().as_nanos() as u64,
            lr,
        });
        Ok(())
    };

    let (loss0, grad0) = sphere_align_loss_grad(&group.weight, &targets)?;
    push_record(
        0,
        loss0,
        &group.weight,
        &grad0,
        config.schedule.lr_at(config.hyper.lr, 0, config.steps.max(1)),
        &mut records,
    )?;

    for t in 0..config.steps {
        let (loss, grad) = sphere_align_loss_grad(&group.weight, &targets)?;
        if !loss.is_finite() {
            return Ok(RunOutcome {
                records,
                diverged: true,
                diagnostic: Some(format!("non-finite loss {loss} at step {t}")),
                val_loss: None,
                baseline_val_loss: None,
                grad_is_stochastic: false,
            });
        }
        group.hyper.lr = config.schedule.lr_at(config.hyper.lr, t, config.steps);
        if let Err(e) = group.step(&grad) {
            return Ok(RunOutcome {
                records,
                diverged: true,
                diagnostic: Some(format!("step {t}: {e}")),
                val_loss: None,
                baseline_val_loss: None,
                grad_is_stochastic: false,
            });
        }
        let done = t + 1 == config.steps;
        if (t + 1) % config.eval_every == 0 || done {
            let (l, g) = sphere_align_loss_grad(&group.weight, &targets)?;
            push_record(t + 1, l, &group.weight, &g, group.hyper.lr, &mut records)?;
        }
    }
    Ok(RunOutcome {
        records,
        diverged: false,
        diagnostic: None,
        val_loss: None,
        baseline_val_loss: None,
        grad_is_stochastic: false,
    })
}

/// Builds the gauss_mix classifier: dense, gained RMS norm, ReLU, dense,
/// softmax cross-entropy. Dense weights route to the configured matrix
/// optimizer; the norm gain routes to Adam.
fn build_classifier(spec: &TaskSpec, hidden: usize, rng: &mut Rng) -> Result<Mlp> {
    Mlp::new(
        &[
            LayerSpec::Dense { in_dim: spec.n, out_dim: hidden },
            LayerSpec::RmsNorm { dim: hidden, has_gain: true },
            LayerSpec::Relu,
            LayerSpec::Dense { in_dim: hidden, out_dim: spec.classes },
            LayerSpec::SoftmaxCe { classes: spec.classes },
        ],
        1.0,
        0.0,
        rng,
    )
}

fn dataset_loss(model: &Mlp, ds: &Dataset) -> Result<f64> {
    let (loss, _) = model.forward(&ds.inputs, &ds.labels)?;
    Ok(loss)
}

fn minibatch(ds: &Dataset, idx: &[usize]) -> (Matrix, Vec<usize>) {
    let mut x = Matrix::zeros(idx.len(), ds.inputs.cols());
    let mut labels = Vec::with_capacity(idx.len());
    for (r, &i) in idx.iter().enumerate() {
        x.row_mut(r).copy_from_slice(ds.inputs.row(i));
        labels.push(ds.labels[i]);
    }
    (x, labels)
}

fn train_gauss_mix(config: &RunConfig) -> Result<RunOutcome> {
    let (train_ds, val_ds) = gauss_mix_generate(&config.task)?;
    let root = Rng::from_seed(config.seed);
    let mut model = build_classifier(&config.task, config.hidden_dim, &mut root.substream("init"))?;
    let baseline_val_loss = dataset_loss(&model, &val_ds)?;

    // Gains always train with Adam at a fixed desk-scale rate, independent of
    // the matrix optimizer under study.
    let adam_hyper = Hyper::adam(3e-3);
    let params = model.params();
    let defs: Vec<ParamDef> = params
        .iter()
        .map(|(name, r, ndim)| ParamDef {
            name: name.clone(),
            weight: model.param_matrix(*r),
            ndim: *ndim,
        })
        .collect();
    let mut groups: Vec<ParamGroup> = route_params(defs, &config.hyper, &adam_hyper)?;

    let mut batch_rng = root.substream("minibatch");
    let mut order: Vec<usize> = (0..train_ds.len()).collect();
    batch_rng.shuffle(&mut order);
    let mut cursor = 0usize;

    let start = Instant::now();
    let mut records = Vec::new();
    let mut diverged = false;
    let mut diagnostic = None;

    for t in 0..=config.steps {
        let record_now = t == 0 || t % config.eval_every == 0 || t == config.steps;
        if t > 0 {
            if cursor + config.batch_size > order.len() {
                batch_rng.shuffle(&mut order);
                cursor = 0;
            }
            let idx = &order[cursor..cursor + config.batch_size.min(order.len())];
            cursor += config.batch_size;
            let (x, labels) = minibatch(&train_ds, idx);
            let (loss, tape) = model.forward(&x, &labels)?;
            if !loss.is_finite() {
                diverged = true;
                diagnostic = Some(format!("non-finite loss at step {t}"));
                break;
            }
            let grads = model.backward(&tape)?;
            let lr = config.schedule.lr_at(config.hyper.lr, t - 1, config.steps);
            let mut failed = None;
            for (group, (_, r, _)) in groups.iter_mut().zip(&params) {
                let base = group.hyper.lr;
                if group.is_matrix_param {
                    group.hyper.lr = lr;
                }
                let g = model.param_grad_matrix(&grads, *r);
                let res = group.step(&g);
                group.hyper.lr = base;
                if let Err(e) = res {
                    failed = Some(format!("step {t}, param {}: {e}", group.id));
                    break;
                }
                model.set_param_matrix(*r, &group.weight);
            }
            if let Some(msg) = failed {
                diverged = true;
                diagnostic = Some(msg);
                break;
            }
            if record_now {
                let lr_used = lr;
                records.push(gauss_mix_record(t, loss, &model, &grads, &params, start, lr_used)?);
            }
        } else if record_now {
            // t = 0: evaluate one minibatch-sized prefix for the loss and
            // gradient snapshot without stepping.
            let idx: Vec<usize> = (0..config.batch_size.min(train_ds.len())).collect();
            let (x, labels) = minibatch(&train_ds, &idx);
            let (loss, tape) = model.forward(&x, &labels)?;
            let grads = model.backward(&tape)?;
            let lr0 = config.schedule.lr_at(config.hyper.lr, 0, config.steps.max(1));
            records.push(gauss_mix_record(0, loss, &model, &grads, &params, start, lr0)?);
        }
    }

    let val_loss = if diverged { None } else { Some(dataset_loss(&model, &val_ds)?) };
    Ok(RunOutcome {
        records,
        diverged,
        diagnostic,
        val_loss,
        baseline_val_loss: Some(baseline_val_loss),
        grad_is_stochastic: true,
    })
}

fn gauss_mix_record(
    step: usize,
    loss: f64,
    model: &Mlp,
    grads: &crate::model::Grads,
    params: &[(String, crate::model::ParamRef, usize)],
    start: Instant,
    lr: f64,
) -> Result<TrainRecord> {
    // Aggregate the projected minibatch gradient over matrix parameters.
    let mut proj_12 = 0.0;
    let mut all_norms: Vec<f64> = Vec::new();
    for (name, r, ndim) in params {
        if crate::optim::is_matrix_routed(name, *ndim) {
            let w = model.param_matrix(*r);
            let g = model.param_grad_matrix(grads, *r);
            proj_12 += row_perp_project(&g, &w)?.norm_12();
            all_norms.extend(w.row_norms());
        }
    }
    let min = all_norms.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = all_norms.iter().cloned().fold(0.0f64, f64::max);
    let mean = all_norms.iter().sum::<f64>() / all_norms.len() as f64;
    Ok(TrainRecord {
        step,
        loss,
        proj_grad_12: proj_12,
        row_norm_min: min,
        row_norm_max: max,
        row_norm_mean: mean,
        wall_ns: start.elapsed().as_nanos() as u64,
        lr,
    })
}

/// CSV serialization of a record stream. `stochastic` marks minibatch
/// gradient estimates in the header comment.
pub fn records_csv(records: &[TrainRecord], stochastic: bool) -> String {
    let mut out = String::new();
    if stochastic {
        out.push_str("# proj_grad_12 is a stochastic minibatch estimate\n");
    }
    out.push_str("step,loss,proj_grad_12,row_norm_min,row_norm_max,row_norm_mean,wall_ns,lr\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.step, r.loss, r.proj_grad_12, r.row_norm_min, r.row_norm_max, r.row_norm_mean,
            r.wall_ns, r.lr
        ));
    }
    out
}

/// One fully exposed canonical-Nora step: everything the audit inequalities
/// mention.
#[derive(Debug, Clone)]
pub struct TrajStep {
    /// Weights before the step.
    pub w: Matrix,
    /// Full-batch gradient at `w`.
    pub grad: Matrix,
    /// Momentum after the EMA update, v_{t+1}.
    pub v: Matrix,
    /// Row-perpendicular projection of `v` against `w`.
    pub v_perp: Matrix,
    /// Update direction, RN(v_perp).
    pub d: Matrix,
    pub eta: f64,
}

/// Runs canonical Nora on sphere_align, exposing per-step internals. The
/// visited weights match [`train`] bit for bit under the same config.
pub fn record_nora_trajectory(config: &RunConfig) -> Result<Vec<TrajStep>> {
    config.validate()?;
    if config.task.kind != TaskKind::SphereAlign || config.hyper.variant != Variant::Nora {
        return Err(Error::invalid("trajectory recording expects Nora on sphere_align"));
    }
    let root = Rng::from_seed(config.seed);
    let (m, n) = (config.task.m, config.task.n);
    let targets = random_unit_rows(m, n, &mut root.substream("task"));
    let mut w = Matrix::random_normal(m, n, SPHERE_INIT_STD, &mut root.substream("init"));
    let mut v = Matrix::zeros(m, n);
    let beta = config.hyper.momentum;
    let wd = config.hyper.weight_decay;
    let mut steps = Vec::with_capacity(config.steps);
    for t in 0..config.steps {
        let (_, grad) = sphere_align_loss_grad(&w, &targets)?;
        // v <- beta v + (1 - beta) g, identical accumulation order to the
        // optimizer's own buffer update.
        v.scale_in_place(beta);
        v.axpy(1.0 - beta, &grad)?;
        let (v_perp, d, _) = nora_direction(&v, &w, config.hyper.rn_eps)?;
        let eta = config.schedule.lr_at(config.hyper.lr, t, config.steps);
        steps.push(TrajStep {
            w: w.clone(),
            grad: grad.clone(),
            v: v.clone(),
            v_perp,
            d: d.clone(),
            eta,
        });
        if wd != 0.0 {
            w.scale_in_place(1.0 - eta * wd);
        }
        w.axpy(-eta, &d)?;
    }
    Ok(steps)
}

#[derive(Debug, Clone)]
pub struct AuditReport {
    pub steps: usize,
    /// max over steps of |<v_perp, d> - ||v_perp||_12| / max(1, ||v_perp||_12)
    pub max_dual_identity_rel: f64,
    /// max over steps of ||d||_F - sqrt(m)
    pub max_d_fro_excess: f64,
    /// max over steps of ||d||_inf2 - 1
    pub max_d_inf2_excess: f64,
    /// max over steps and rows of |<d_i, w_i>| / max(1, ||w_i||)
    pub max_row_orth: f64,
    /// max relative expansion of the projection over the F, (1,2), (inf,2) norms
    pub max_expansion: f64,
    /// min over steps of <G, d> - (||G||_12 - 2 ||ebar||_12)
    pub min_lower_bound_slack: f64,
    /// max over steps of ||G - grad||_F / max(1, ||grad||_F); on sphere_align
    /// the gradient is already tangential so this stays tiny
    pub max_proj_gap: f64,
    pub failures: Vec<String>,
    pub passed: bool,
}

pub const AUDIT_DUAL_TOL: f64 = 1e-10;
pub const AUDIT_NORM_TOL: f64 = 1e-12;
pub const AUDIT_ORTH_TOL: f64 = 1e-10;
pub const AUDIT_EXPANSION_TOL: f64 = 1e-12;
pub const AUDIT_SLACK_TOL: f64 = -1e-9;
pub const AUDIT_PROJ_GAP_TOL: f64 = 1e-9;

/// Checks the per-step identities and inequalities of the update geometry on
/// a recorded trajectory: the duality identity <v_perp, d> = ||v_perp||_12,
/// the norm caps ||d||_F <= sqrt(m) and ||d||_inf2 <= 1, row orthogonality
/// of d to w, non-expansiveness of the projection in three norms, and the
/// inner-product lower bound <G, d> >= ||G||_12 - 2 ||ebar||_12 where
/// G is the projected gradient and ebar the projected momentum error.
pub fn lemma_audit(traj: &[TrajStep]) -> Result<AuditReport> {
    if traj.is_empty() {
        return Err(Error::invalid("empty trajectory"));
    }
    let mut report = AuditReport {
        steps: traj.len(),
        max_dual_identity_rel: 0.0,
        max_d_fro_excess: f64::NEG_INFINITY,
        max_d_inf2_excess: f64::NEG_INFINITY,
        max_row_orth: 0.0,
        max_expansion: f64::NEG_INFINITY,
        min_lower_bound_slack: f64::INFINITY,
        max_proj_gap: 0.0,
        failures: Vec::new(),
        passed: true,
    };
    let fail = |failures: &mut Vec<String>, msg: String| failures.push(msg);
    for (t, s) in traj.iter().enumerate() {
        let m = s.w.rows() as f64;

        let dual = s.v_perp.inner(&s.d)?;
        let v12 = s.v_perp.norm_12();
        let dual_rel = (dual - v12).abs() / v12.abs().max(1.0);
        report.max_dual_identity_rel = report.max_dual_identity_rel.max(dual_rel);
        if dual_rel > AUDIT_DUAL_TOL {
            fail(&mut report.failures, format!("step {t}: duality identity off by {dual_rel:.3e}"));
        }

        let fro_excess = s.d.norm_fro() - m.sqrt();
        report.max_d_fro_excess = report.max_d_fro_excess.max(fro_excess);
        if fro_excess > AUDIT_NORM_TOL {
            fail(&mut report.failures, format!("step {t}: ||d||_F exceeds sqrt(m) by {fro_excess:.3e}"));
        }
        let inf2_excess = s.d.norm_inf2() - 1.0;
        report.max_d_inf2_excess = report.max_d_inf2_excess.max(inf2_excess);
        if inf2_excess > AUDIT_NORM_TOL {
            fail(&mut report.failures, format!("step {t}: ||d||_inf2 exceeds 1 by {inf2_excess:.3e}"));
        }

        let dots = s.d.row_dot(&s.w)?;
        let wnorms = s.w.row_norms();
        for (i, (&dw, &wn)) in dots.iter().zip(&wnorms).enumerate() {
            let viol = dw.abs() / wn.max(1.0);
            report.max_row_orth = report.max_row_orth.max(viol);
            if viol > AUDIT_ORTH_TOL {
                fail(&mut report.failures, format!("step {t} row {i}: <d,w> = {dw:.3e}"));
            }
        }

        // Non-expansiveness of this step's projection, on the momentum it
        // actually projected, in all three norms.
        for (norm_name, before, after) in [
            ("F", s.v.norm_fro(), s.v_perp.norm_fro()),
            ("(1,2)", s.v.norm_12(), s.v_perp.norm_12()),
            ("(inf,2)", s.v.norm_inf2(), s.v_perp.norm_inf2()),
        ] {
            let expansion = (after - before) / before.max(1.0);
            report.max_expansion = report.max_expansion.max(expansion);
            if expansion > AUDIT_EXPANSION_TOL {
                fail(&mut report.failures, format!("step {t}: projection expanded the {norm_name} norm by {expansion:.3e}"));
            }
        }

        let g_proj = row_perp_project(&s.grad, &s.w)?;
        let ebar = s.v_perp.sub(&g_proj)?;
        let slack = g_proj.inner(&s.d)? - (g_proj.norm_12() - 2.0 * ebar.norm_12());
        report.min_lower_bound_slack = report.min_lower_bound_slack.min(slack);
        if slack < AUDIT_SLACK_TOL {
            fail(&mut report.failures, format!("step {t}: lower-bound slack {slack:.3e}"));
        }

        let gap = g_proj.sub(&s.grad)?.norm_fro() / s.grad.norm_fro().max(1.0);
        report.max_proj_gap = report.max_proj_gap.max(gap);
        if gap > AUDIT_PROJ_GAP_TOL {
            fail(&mut report.failures, format!("step {t}: projected gradient differs from gradient by {gap:.3e}"));
        }
    }
    report.passed = report.failures.is_empty();
    Ok(report)
}

pub fn audit_text(report: &AuditReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("steps audited: {}\n", report.steps));
    out.push_str(&format!("max duality identity rel err: {:.3e}\n", report.max_dual_identity_rel));
    out.push_str(&format!("max ||d||_F - sqrt(m): {:.3e}\n", report.max_d_fro_excess));
    out.push_str(&format!("max ||d||_inf2 - 1: {:.3e}\n", report.max_d_inf2_excess));
    out.push_str(&format!("max row |<d,w>| (scaled): {:.3e}\n", report.max_row_orth));
    out.push_str(&format!("max projection expansion: {:.3e}\n", report.max_expansion));
    out.push_str(&format!("min lower-bound slack: {:.3e}\n", report.min_lower_bound_slack));
    out.push_str(&format!("max projected-vs-raw gradient gap: {:.3e}\n", report.max_proj_gap));
    out.push_str(if report.passed { "audit: PASS\n" } else { "audit: FAIL\n" });
    for f in &report.failures {
        out.push_str(&format!("  violation: {f}\n"));
    }
    out
}

#[derive(Debug, Clone)]
pub struct ScalePoint {
    pub width: usize,
    /// Mean over seeds and rows of sgn(delta_i) <d_i, x>.
    pub mean_dot: f64,
    /// mean_dot / (sigma_x sqrt(n)); approaches 1 for wide layers.
    pub normalized_mean: f64,
    /// Fraction of measurements whose sign matches delta_i.
    pub sign_agreement: f64,
}

#[derive(Debug, Clone)]
pub struct ScalingReport {
    pub points: Vec<ScalePoint>,
    /// Fitted exponent of mean_dot vs. width (log-log least squares); None
    /// when degenerate.
    pub slope: Option<f64>,
    /// Measured constant c in mean_dot = c * n^slope, for reading off the
    /// base learning rate of the 1/sqrt(n) prescription.
    pub constant: Option<f64>,
    pub degenerate: bool,
    pub sigma_x: f64,
}

pub fn scaling_experiment(
    widths: &[usize],
    seeds: &[u64],
    rows: usize,
    sigma_w: f64,
    sigma_x: f64,
    direction: ProbeDirection,
    mode: Execution,
) -> Result<ScalingReport> {
    if widths.len() < 4 {
        return Err(Error::invalid("scaling experiment needs at least 4 widths"));
    }
    if seeds.len() < 8 {
        return Err(Error::invalid("scaling experiment needs at least 8 seeds"));
    }
    let records = mup_probe(widths, seeds, rows, sigma_w, sigma_x, direction, mode)?;
    let mut points = Vec::new();
    for &width in widths {
        let mut vals = Vec::new();
        let mut agree = 0usize;
        let mut total = 0usize;
        for rec in records.iter().filter(|r| r.width == width) {
            for (&dot, &delta) in rec.dots.iter().zip(&rec.deltas) {
                vals.push(delta.signum() * dot);
                total += 1;
                if dot * delta > 0.0 {
                    agree += 1;
                }
            }
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        points.push(ScalePoint {
            width,
            mean_dot: mean,
            normalized_mean: mean / (sigma_x * (width as f64).sqrt()),
            sign_agreement: agree as f64 / total as f64,
        });
    }
    let degenerate = points.iter().any(|p| !(p.mean_dot.is_finite() && p.mean_dot > 0.0));
    let (slope, constant) = if degenerate {
        (None, None)
    } else {
        let xs: Vec<f64> = points.iter().map(|p| (p.width as f64).ln()).collect();
        let ys: Vec<f64> = points.iter().map(|p| p.mean_dot.ln()).collect();
        let (a, b) = least_squares_line(&xs, &ys);
        (Some(a), Some(b.exp()))
    };
    Ok(ScalingReport {
        points,
        slope,
        constant,
        degenerate,
        sigma_x,
    })
}

/// Ordinary least squares fit y = a x + b; returns (a, b).
pub fn least_squares_line(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    let a = sxy / sxx;
    (a, my - a * mx)
}

pub fn scaling_csv(report: &ScalingReport) -> String {
    let mut out = String::from("width,mean_dot,normalized_mean,sign_agreement\n");
    for p in &report.points {
        out.push_str(&format!(
            "{},{},{},{}\n",
            p.width, p.mean_dot, p.normalized_mean, p.sign_agreement
        ));
    }
    out
}

pub fn scaling_text(report: &ScalingReport) -> String {
    let mut out = String::new();
    match (report.slope, report.constant) {
        (Some(s), Some(c)) => {
            out.push_str(&format!("fitted exponent: {s:.4}\n"));
            out.push_str(&format!("measured constant: {c:.4} (per-row step scales like c * n^{s:.2})\n"));
            out.push_str(&format!(
                "implied prescription: lr proportional to 1/sqrt(n), base read off as eta0 = target_update / {c:.4}\n"
            ));
        }
        _ => out.push_str("degenerate measurement: direction produced no usable signal\n"),
    }
    for p in &report.points {
        out.push_str(&format!(
            "  n = {:6}: mean <d,x> = {:.4}, normalized = {:.4}, sign agreement = {:.3}\n",
            p.width, p.mean_dot, p.normalized_mean, p.sign_agreement
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct CompareEntry {
    pub label: String,
    pub variant: Variant,
    pub weight_decay: f64,
    pub lrs: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct CompareRow {
    pub label: String,
    pub variant: Variant,
    pub weight_decay: f64,
    pub best_lr: f64,
    pub val_loss: f64,
    /// Fractional reduction vs. the untrained baseline.
    pub reduction: f64,
}

#[derive(Debug, Clone)]
pub struct CompareReport {
    pub baseline_val_loss: f64,
    pub rows: Vec<CompareRow>,
}

/// Default comparison grid: the four matrix optimizers plus Adam, with the
/// decay ablation rows for Nora (decay 0 vs. 0.1).
pub fn default_compare_entries() -> Vec<CompareEntry> {
    let lrs = vec![0.01, 0.03, 0.1];
    let adam_lrs = vec![0.001, 0.003, 0.01];
    vec![
        CompareEntry { label: "nora".into(), variant: Variant::Nora, weight_decay: 0.0, lrs: lrs.clone() },
        CompareEntry { label: "nora (decay 0.1)".into(), variant: Variant::Nora, weight_decay: 0.1, lrs: lrs.clone() },
        CompareEntry { label: "rmnp".into(), variant: Variant::Rmnp, weight_decay: 0.0, lrs: lrs.clone() },
        CompareEntry { label: "mano".into(), variant: Variant::Mano, weight_decay: 0.0, lrs: lrs.clone() },
        CompareEntry { label: "muon".into(), variant: Variant::Muon, weight_decay: 0.0, lrs: lrs.clone() },
        CompareEntry { label: "adam".into(), variant: Variant::Adam, weight_decay: 0.0, lrs: adam_lrs },
    ]
}

/// Trains every (entry, lr) cell on the shared task, seed, and schedule and
/// keeps each entry's best validation loss. Grid cells run in parallel; each
/// run is serial and seeded identically, so results do not depend on mode.
pub fn compare_optimizers(
    base: &RunConfig,
    entries: &[CompareEntry],
    mode: Execution,
) -> Result<CompareReport> {
    if base.task.kind != TaskKind::GaussMix {
        return Err(Error::invalid("comparison grid runs on gauss_mix"));
    }
    let mut jobs = Vec::new();
    for (ei, entry) in entries.iter().enumerate() {
        for &lr in &entry.lrs {
            jobs.push((ei, lr));
        }
    }
    let outcomes = map_indexed(mode, jobs.len(), |j| {
        let (ei, lr) = jobs[j];
        let entry = &entries[ei];
        let mut cfg = base.clone();
        cfg.hyper = Hyper::new(entry.variant, lr).with_weight_decay(entry.weight_decay);
        train(&cfg).map(|o| (ei, lr, o))
    });
    let mut baseline = None;
    let mut best: Vec<Option<(f64, f64)>> = vec![None; entries.len()];
    for res in outcomes {
        let (ei, lr, outcome) = res?;
        if let Some(b) = outcome.baseline_val_loss {
            baseline = Some(b);
        }
        if outcome.diverged {
            continue;
        }
        let val = outcome.val_loss.expect("non-diverged run has val loss");
        if best[ei].map_or(true, |(_, v)| val < v) {
            best[ei] = Some((lr, val));
        }
    }
    let baseline = baseline.ok_or_else(|| Error::invalid("no run produced a baseline"))?;
    let rows = entries
        .iter()
        .zip(&best)
        .map(|(entry, b)| {
            let (best_lr, val_loss) = b.ok_or_else(|| {
                Error::invalid(format!("all grid runs diverged for '{}'", entry.label))
            })?;
            Ok(CompareRow {
                label: entry.label.clone(),
                variant: entry.variant,
                weight_decay: entry.weight_decay,
                best_lr,
                val_loss,
                reduction: 1.0 - val_loss / baseline,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CompareReport { baseline_val_loss: baseline, rows })
}

pub fn compare_markdown(report: &CompareReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "untrained baseline validation loss: {:.4}\n\n",
        report.baseline_val_loss
    ));
    out.push_str("| Optimizer | Weight decay | Best lr | Val loss | Reduction |\n");
    out.push_str("|-----------|--------------|---------|----------|-----------|\n");
    for r in &report.rows {
        out.push_str(&format!(
            "| {} | {} | {} | {:.4} | {:.1}% |\n",
            r.label,
            r.weight_decay,
            r.best_lr,
            r.val_loss,
            100.0 * r.reduction
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_steps_yields_single_initial_record() {
        let mut cfg = RunConfig::sphere_align_default(5);
        cfg.steps = 0;
        let out = train(&cfg).unwrap();
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.records[0].step, 0);
        assert!(out.records[0].loss.is_finite());
        assert!(!out.diverged);
    }

    #[test]
    fn identical_config_identical_records() {
        let mut cfg = RunConfig::sphere_align_default(6);
        cfg.steps = 50;
        cfg.eval_every = 10;
        let a = train(&cfg).unwrap();
        let b = train(&cfg).unwrap();
        assert_eq!(a.records.len(), b.records.len());
        for (x, y) in a.records.iter().zip(&b.records) {
            // Everything but the wall clock is bit-identical.
            assert_eq!(x.step, y.step);
            assert_eq!(x.loss.to_bits(), y.loss.to_bits());
            assert_eq!(x.proj_grad_12.to_bits(), y.proj_grad_12.to_bits());
            assert_eq!(x.row_norm_mean.to_bits(), y.row_norm_mean.to_bits());
        }
    }

    #[test]
    fn records_are_strictly_increasing_and_finite() {
        let mut cfg = RunConfig::sphere_align_default(7);
        cfg.steps = 120;
        cfg.eval_every = 30;
        let out = train(&cfg).unwrap();
        for pair in out.records.windows(2) {
            assert!(pair[1].step > pair[0].step);
            assert!(pair[1].wall_ns >= pair[0].wall_ns, "wall clock monotone");
        }
        for r in &out.records {
            assert!(r.loss.is_finite() && r.proj_grad_12.is_finite());
            assert!(r.row_norm_min <= r.row_norm_mean && r.row_norm_mean <= r.row_norm_max);
        }
    }

    #[test]
    fn row_norms_nondecreasing_without_decay() {
        let mut cfg = RunConfig::sphere_align_default(8);
        cfg.steps = 200;
        cfg.eval_every = 20;
        let out = train(&cfg).unwrap();
        for pair in out.records.windows(2) {
            assert!(
                pair[1].row_norm_min >= pair[0].row_norm_min - 1e-12,
                "row norms nondecreasing with zero decay"
            );
        }
    }

    #[test]
    fn trajectory_matches_optimizer_weights_bitwise() {
        let mut cfg = RunConfig::sphere_align_default(9);
        cfg.task = TaskSpec::sphere_align(8, 16, 9);
        cfg.steps = 25;
        let traj = record_nora_trajectory(&cfg).unwrap();

        // Re-run through the packaged optimizer and compare visited weights.
        let root = Rng::from_seed(cfg.seed);
        let targets = random_unit_rows(8, 16, &mut root.substream("task"));
        let w0 = Matrix::random_normal(8, 16, SPHERE_INIT_STD, &mut root.substream("init"));
        let mut group = ParamGroup::new("w", w0, cfg.hyper.clone(), true).unwrap();
        for s in &traj {
            assert_eq!(s.w.data(), group.weight.data(), "bitwise identical visit");
            let (_, grad) = sphere_align_loss_grad(&group.weight, &targets).unwrap();
            group.step(&grad).unwrap();
        }
    }

    #[test]
    fn audit_passes_on_short_run() {
        let mut cfg = RunConfig::sphere_align_default(10);
        cfg.task = TaskSpec::sphere_align(16, 48, 10);
        cfg.steps = 60;
        let traj = record_nora_trajectory(&cfg).unwrap();
        let report = lemma_audit(&traj).unwrap();
        assert!(report.passed, "{:?}", report.failures);
    }

    #[test]
    fn audit_beta_zero_momentum_error_vanishes() {
        let mut cfg = RunConfig::sphere_align_default(11);
        cfg.task = TaskSpec::sphere_align(8, 24, 11);
        cfg.hyper = Hyper::nora(0.01).with_momentum(0.0);
        cfg.steps = 30;
        let traj = record_nora_trajectory(&cfg).unwrap();
        for s in &traj {
            // With beta = 0 the momentum is the gradient, so the projected
            // error is zero and <G, d> = ||G||_12.
            let g_proj = row_perp_project(&s.grad, &s.w).unwrap();
            let ebar = s.v_perp.sub(&g_proj).unwrap();
            assert!(ebar.norm_12() <= 1e-12 * s.grad.norm_12().max(1.0));
            let lhs = g_proj.inner(&s.d).unwrap();
            assert!((lhs - g_proj.norm_12()).abs() <= 1e-9 * g_proj.norm_12().max(1.0));
        }
    }

    #[test]
    fn audit_flags_tampered_direction() {
        let mut cfg = RunConfig::sphere_align_default(12);
        cfg.task = TaskSpec::sphere_align(4, 8, 12);
        cfg.steps = 5;
        let mut traj = record_nora_trajectory(&cfg).unwrap();
        // Corrupt one direction row with a radial component.
        let w_row0: Vec<f64> = traj[2].w.row(0).to_vec();
        let d = &mut traj[2].d;
        for (j, v) in d.row_mut(0).iter_mut().enumerate() {
            *v += 0.5 * w_row0[j];
        }
        let report = lemma_audit(&traj).unwrap();
        assert!(!report.passed);
        assert!(report.failures.iter().any(|f| f.contains("step 2")));
    }

    #[test]
    fn schedule_warmup_then_decay() {
        let s = Schedule::CosineWarmup { warmup_steps: 10 };
        assert!((s.lr_at(1.0, 0, 100) - 0.1).abs() < 1e-12);
        assert!((s.lr_at(1.0, 9, 100) - 1.0).abs() < 1e-12);
        assert!(s.lr_at(1.0, 50, 100) < 1.0);
        assert!(s.lr_at(1.0, 99, 100) < 0.01);
        assert_eq!(Schedule::Constant.lr_at(0.3, 57, 100), 0.3);
    }

    #[test]
    fn scaling_requires_enough_widths_and_seeds() {
        let seeds: Vec<u64> = (0..8).collect();
        assert!(scaling_experiment(&[256, 512], &seeds, 4, 1.0, 1.0, ProbeDirection::Nora, Execution::Sequential).is_err());
        assert!(scaling_experiment(&[256, 512, 1024, 2048], &seeds[..4], 4, 1.0, 1.0, ProbeDirection::Nora, Execution::Sequential).is_err());
    }

    #[test]
    fn scaling_zero_direction_is_degenerate() {
        let seeds: Vec<u64> = (0..8).collect();
        let rep = scaling_experiment(
            &[256, 512, 1024, 2048],
            &seeds,
            4,
            1.0,
            1.0,
            ProbeDirection::Zero,
            Execution::Sequential,
        )
        .unwrap();
        assert!(rep.degenerate);
        assert!(rep.slope.is_none());
    }

    #[test]
    fn least_squares_recovers_exact_line() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys: Vec<f64> = xs.iter().map(|x| 2.5 * x - 1.0).collect();
        let (a, b) = least_squares_line(&xs, &ys);
        assert!((a - 2.5).abs() < 1e-12);
        assert!((b + 1.0).abs() < 1e-12);
    }

    #[test]
    fn gauss_mix_short_run_improves_loss() {
        let mut cfg = RunConfig::gauss_mix_default(21);
        cfg.steps = 60;
        cfg.eval_every = 20;
        cfg.task.train_size = 1024;
        cfg.task.val_size = 256;
        let out = train(&cfg).unwrap();
        assert!(!out.diverged);
        let baseline = out.baseline_val_loss.unwrap();
        let val = out.val_loss.unwrap();
        assert!(val < baseline, "{val} < {baseline}");
        assert!(out.grad_is_stochastic);
    }

    #[test]
    fn compare_single_cell_one_row_table() {
        let mut cfg = RunConfig::gauss_mix_default(22);
        cfg.steps = 20;
        cfg.task.train_size = 512;
        cfg.task.val_size = 128;
        let entries = vec![CompareEntry {
            label: "nora".into(),
            variant: Variant::Nora,
            weight_decay: 0.0,
            lrs: vec![0.03],
        }];
        let report = compare_optimizers(&cfg, &entries, Execution::Sequential).unwrap();
        assert_eq!(report.rows.len(), 1);
        let md = compare_markdown(&report);
        assert_eq!(md.lines().filter(|l| l.starts_with("| nora")).count(), 1);
    }

    #[test]
    fn csv_has_header_and_stochastic_label() {
        let rec = TrainRecord {
            step: 0,
            loss: 1.0,
            proj_grad_12: 2.0,
            row_norm_min: 0.5,
            row_norm_max: 1.5,
            row_norm_mean: 1.0,
            wall_ns: 10,
            lr: 0.01,
        };
        let csv = records_csv(&[rec.clone()], true);
        assert!(csv.starts_with("# proj_grad_12 is a stochastic minibatch estimate\n"));
        assert!(csv.contains("step,loss,proj_grad_12"));
        let csv2 = records_csv(&[rec], false);
        assert!(csv2.starts_with("step,"));
    }
}
