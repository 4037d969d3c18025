//! Deterministic synthetic objectives and datasets.
//!
//! * `sphere_align`: a closed-form objective that is exactly row-wise scale
//!   invariant, f(w) = sum_i 0.5 ||w_i/||w_i|| - u_i||^2 for unit targets u.
//! * `gauss_mix`: a Gaussian-mixture classification set with class means on
//!   a scaled simplex and exactly balanced labels.
//! * `mup_probe`: the width-scaling measurement <d_i, x> for the
//!   row-projected, row-normalized direction of a rank-one gradient.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::exec::{map_indexed, Execution};
use crate::geometry::{row_normalize, row_perp_project};
use crate::matrix::{dot, Matrix};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    SphereAlign,
    GaussMix,
    MupProbe,
}

impl TaskKind {
    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::SphereAlign => "sphere_align",
            TaskKind::GaussMix => "gauss_mix",
            TaskKind::MupProbe => "mup_probe",
        }
    }

    pub fn parse(s: &str) -> Result<TaskKind> {
        match s {
            "sphere_align" => Ok(TaskKind::SphereAlign),
            "gauss_mix" => Ok(TaskKind::GaussMix),
            "mup_probe" => Ok(TaskKind::MupProbe),
            other => Err(Error::invalid(format!("unknown task kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub m: usize,
    pub n: usize,
    pub classes: usize,
    pub seed: u64,
    pub noise: f64,
    pub train_size: usize,
    pub val_size: usize,
}

impl TaskSpec {
    pub fn sphere_align(m: usize, n: usize, seed: u64) -> TaskSpec {
        TaskSpec {
            kind: TaskKind::SphereAlign,
            m,
            n,
            classes: 0,
            seed,
            noise: 0.0,
            train_size: 0,
            val_size: 0,
        }
    }

    pub fn gauss_mix(seed: u64) -> TaskSpec {
        TaskSpec {
            kind: TaskKind::GaussMix,
            m: 0,
            n: 64,
            classes: 8,
            seed,
            noise: 1.0,
            train_size: 8192,
            val_size: 2048,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            TaskKind::SphereAlign => {
                if self.m < 1 || self.n < 1 {
                    return Err(Error::invalid("sphere_align needs m, n >= 1"));
                }
            }
            TaskKind::GaussMix => {
                if self.classes < 2 {
                    return Err(Error::invalid("gauss_mix needs classes >= 2"));
                }
                if self.n < self.classes {
                    return Err(Error::invalid("gauss_mix needs n >= classes"));
                }
                if self.noise < 0.0 {
                    return Err(Error::invalid("noise must be >= 0"));
                }
                if self.train_size < 1 || self.val_size < 1 {
                    return Err(Error::invalid("gauss_mix needs nonempty splits"));
                }
            }
            TaskKind::MupProbe => {}
        }
        Ok(())
    }
}

/// Unit-row targets for sphere alignment.
pub fn random_unit_rows(m: usize, n: usize, rng: &mut Rng) -> Matrix {
    let raw = Matrix::random_normal(m, n, 1.0, rng);
    row_normalize(&raw, 0.0)
}

/// Loss and analytic gradient of f(w) = sum_i 0.5 ||w_i/||w_i||_2 - u_i||^2.
///
/// Each gradient row is orthogonal to the matching weight row, so the
/// objective is exactly row-wise scale invariant. Rows of `w` must be
/// nonzero; target rows must be unit norm.
pub fn sphere_align_loss_grad(w: &Matrix, targets: &Matrix) -> Result<(f64, Matrix)> {
    w.same_shape(targets)?;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(w.rows(), w.cols());
    for i in 0..w.rows() {
        let wr = w.row(i);
        let ur = targets.row(i);
        let wnorm = dot(wr, wr).sqrt();
        if wnorm == 0.0 {
            return Err(Error::invalid(format!("zero weight row {i}")));
        }
        let unorm = dot(ur, ur).sqrt();
        if (unorm - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("target row {i} is not unit norm")));
        }
        let cos = dot(wr, ur) / wnorm;
        // 0.5 ||w_hat - u||^2 = 1 - <w_hat, u>
        loss += 1.0 - cos;
        // grad = -(u - <w_hat, u> w_hat) / ||w||
        let gr = grad.row_mut(i);
        for j in 0..wr.len() {
            let w_hat = wr[j] / wnorm;
            gr[j] = -(ur[j] - cos * w_hat) / wnorm;
        }
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Class means on a scaled simplex: mean_k has value c * (1[j == k] - 1/K)
/// in its first K coordinates and zero elsewhere. For K = 2 this gives two
/// symmetric means.
fn gauss_mix_means(classes: usize, n: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..classes)
        .map(|k| {
            (0..n)
                .map(|j| {
                    if j < classes {
                        scale * (if j == k { 1.0 } else { 0.0 } - 1.0 / classes as f64)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

const GAUSS_MIX_MEAN_SCALE: f64 = 4.0;

/// Generates train and validation splits. Labels are assigned round-robin,
/// so class priors are exactly balanced; a fixed seed gives identical bytes.
pub fn gauss_mix_generate(spec: &TaskSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    if spec.kind != TaskKind::GaussMix {
        return Err(Error::invalid("spec is not gauss_mix"));
    }
    let means = gauss_mix_means(spec.classes, spec.n, GAUSS_MIX_MEAN_SCALE);
    let mut rng = Rng::from_seed(spec.seed).substream("gauss_mix");
    let make_split = |count: usize, rng: &mut Rng| -> Dataset {
        let mut inputs = Matrix::zeros(count, spec.n);
        let mut labels = Vec::with_capacity(count);
        for idx in 0..count {
            let label = idx % spec.classes;
            labels.push(label);
            let row = inputs.row_mut(idx);
            for j in 0..spec.n {
                row[j] = means[label][j] + spec.noise * rng.normal();
            }
        }
        Dataset {
            inputs,
            labels,
            classes: spec.classes,
        }
    };
    let train = make_split(spec.train_size, &mut rng);
    let val = make_split(spec.val_size, &mut rng);
    Ok((train, val))
}

const DATASET_MAGIC: &[u8; 8] = b"NORADS01";

/// Binary dataset file: magic, u64 rows/cols/classes, row-major f64 LE
/// inputs, then u64 LE labels. A `.spec.txt` sidecar records the task spec.
pub fn save_dataset(path: &Path, ds: &Dataset, spec: &TaskSpec) -> Result<()> {
    let mut buf = Vec::with_capacity(32 + ds.inputs.data().len() * 8 + ds.labels.len() * 8);
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&(ds.inputs.rows() as u64).to_le_bytes());
    buf.extend_from_slice(&(ds.inputs.cols() as u64).to_le_bytes());
    buf.extend_from_slice(&(ds.classes as u64).to_le_bytes());
    for v in ds.inputs.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &l in &ds.labels {
        buf.extend_from_slice(&(l as u64).to_le_bytes());
    }
    fs::File::create(path)?.write_all(&buf)?;
    let sidecar = path.with_extension("spec.txt");
    let text = format!(
        "kind = {}\nm = {}\nn = {}\nclasses = {}\nseed = {}\nnoise = {}\ntrain_size = {}\nval_size = {}\n",
        spec.kind.name(), spec.m, spec.n, spec.classes, spec.seed, spec.noise,
        spec.train_size, spec.val_size
    );
    fs::write(sidecar, text)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 32 || &bytes[..8] != DATASET_MAGIC {
        return Err(Error::invalid("not a dataset file (bad magic)"));
    }
    let rd_u64 = |off: usize| u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
    let rows = rd_u64(8) as usize;
    let cols = rd_u64(16) as usize;
    let classes = rd_u64(24) as usize;
    let data_bytes = rows * cols * 8;
    let expect = 32 + data_bytes + rows * 8;
    if bytes.len() != expect {
        return Err(Error::invalid(format!(
            "dataset file length {} != expected {expect}",
            bytes.len()
        )));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows * cols {
        let off = 32 + i * 8;
        data.push(f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()));
    }
    let mut labels = Vec::with_capacity(rows);
    for i in 0..rows {
        let off = 32 + data_bytes + i * 8;
        labels.push(rd_u64(off) as usize);
    }
    Ok(Dataset {
        inputs: Matrix::from_vec(rows, cols, data)?,
        labels,
        classes,
    })
}

/// How the probe turns the rank-one gradient into an update direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeDirection {
    /// Row-perpendicular projection then row normalization.
    Nora,
    /// Row normalization only.
    Rmnp,
    /// Degenerate control: zero direction.
    Zero,
}

#[derive(Debug, Clone)]
pub struct ProbeRecord {
    pub width: usize,
    pub seed: u64,
    /// Per-row sgn(delta_i) * <d_i, x>; positive when the direction tracks
    /// the error sign.
    pub signed_dots: Vec<f64>,
    /// Raw <d_i, x> per row.
    pub dots: Vec<f64>,
    pub deltas: Vec<f64>,
}

/// Measures <d_i, x> for weights with rows ~ N(0, sigma_w^2 I / n), input
/// entries ~ N(0, sigma_x^2), error signs delta_i in {-1, +1}, and the
/// rank-one gradient g_i = delta_i x^T.
pub fn mup_probe(
    widths: &[usize],
    seeds: &[u64],
    rows: usize,
    sigma_w: f64,
    sigma_x: f64,
    direction: ProbeDirection,
    mode: Execution,
) -> Result<Vec<ProbeRecord>> {
    if widths.iter().any(|&n| n < 64) {
        return Err(Error::invalid("probe widths must be >= 64"));
    }
    let mut jobs = Vec::new();
    for &width in widths {
        for &seed in seeds {
            jobs.push((width, seed));
        }
    }
    let records = map_indexed(mode, jobs.len(), |idx| {
        let (width, seed) = jobs[idx];
        probe_one(width, seed, rows, sigma_w, sigma_x, direction)
    });
    records.into_iter().collect()
}

fn probe_one(
    width: usize,
    seed: u64,
    rows: usize,
    sigma_w: f64,
    sigma_x: f64,
    direction: ProbeDirection,
) -> Result<ProbeRecord> {
    let mut rng = Rng::from_seed(seed).substream(&format!("mup_probe/{width}"));
    let w = Matrix::random_normal(rows, width, sigma_w / (width as f64).sqrt(), &mut rng);
    let mut x = vec![0.0; width];
    rng.fill_normal(&mut x);
    for v in &mut x {
        *v *= sigma_x;
    }
    // delta_i in {-1, +1}, alternating so both signs are always exercised.
    let deltas: Vec<f64> = (0..rows).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let g = Matrix::from_fn(rows, width, |i, j| deltas[i] * x[j]);
    let d = match direction {
        ProbeDirection::Nora => row_normalize(&row_perp_project(&g, &w)?, 0.0),
        ProbeDirection::Rmnp => row_normalize(&g, 0.0),
        ProbeDirection::Zero => Matrix::zeros(rows, width),
    };
    let dots: Vec<f64> = (0..rows).map(|i| dot(d.row(i), &x)).collect();
    let signed_dots: Vec<f64> = dots
        .iter()
        .zip(&deltas)
        .map(|(&v, &s)| s.signum() * v)
        .collect();
    Ok(ProbeRecord {
        width,
        seed,
        signed_dots,
        dots,
        deltas,
    })
}
