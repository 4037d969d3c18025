//! Kernel microbenchmark: row normalization vs. five-step Newton-Schulz
//! orthogonalization on representative LLaMA-style matrix shapes.
//!
//! Measurement is single-threaded on a monotonic clock. Both methods see the
//! same Frobenius-prescaled input, matching what the optimizers feed their
//! kernels. The Newton-Schulz timing uses a packed gemm (f32 or f64); row
//! normalization is the plain two-pass loop. Absolute times are hardware
//! bound; only ratios and orderings are meaningful.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn name(&self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }

    pub fn parse(s: &str) -> Result<Precision> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::invalid(format!("unknown precision '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    RowNorm,
    Ns5,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::RowNorm => "row_norm",
            Method::Ns5 => "ns5",
        }
    }
}

/// One shape from the reference table, with its model-scale and layer labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchShape {
    pub rows: usize,
    pub cols: usize,
    pub scale: &'static str,
    pub layer: &'static str,
}

/// The 12 default shapes: per model scale, the square attention projection
/// and the two MLP projections.
pub const DEFAULT_SHAPES: [BenchShape; 12] = [
    BenchShape { rows: 512, cols: 512, scale: "60M", layer: "attention: hidden x hidden" },
    BenchShape { rows: 1376, cols: 512, scale: "60M", layer: "MLP: intermediate x hidden" },
    BenchShape { rows: 512, cols: 1376, scale: "60M", layer: "MLP: hidden x intermediate" },
    BenchShape { rows: 768, cols: 768, scale: "135M", layer: "attention: hidden x hidden" },
    BenchShape { rows: 2048, cols: 768, scale: "135M", layer: "MLP: intermediate x hidden" },
    BenchShape { rows: 768, cols: 2048, scale: "135M", layer: "MLP: hidden x intermediate" },
    BenchShape { rows: 1024, cols: 1024, scale: "350M", layer: "attention: hidden x hidden" },
    BenchShape { rows: 2816, cols: 1024, scale: "350M", layer: "MLP: intermediate x hidden" },
    BenchShape { rows: 1024, cols: 2816, scale: "350M", layer: "MLP: hidden x intermediate" },
    BenchShape { rows: 2048, cols: 2048, scale: "1B", layer: "attention: hidden x hidden" },
    BenchShape { rows: 5461, cols: 2048, scale: "1B", layer: "MLP: intermediate x hidden" },
    BenchShape { rows: 2048, cols: 5461, scale: "1B", layer: "MLP: hidden x intermediate" },
];

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub rows: usize,
    pub cols: usize,
    pub scale: String,
    pub layer: String,
    pub method: Method,
    pub mean_ms: f64,
    pub std_ms: f64,
    /// ns5.mean / row_norm.mean for the matching shape; 1.0 on row_norm rows.
    pub ratio_vs_rownorm: f64,
    pub precision: Precision,
    pub warmup: usize,
    pub iters: usize,
    /// Set when the timer resolution exceeded 1% of the measured mean.
    pub timer_warning: bool,
}

/// Smallest positive interval the monotonic clock can report, estimated by
/// polling adjacent timestamps.
fn timer_resolution_ns() -> f64 {
    let mut best = f64::INFINITY;
    for _ in 0..64 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        let d = (b - a).as_nanos() as f64;
        if d > 0.0 && d < best {
            best = d;
        }
    }
    best
}

fn mean_std(samples_ms: &[f64]) -> (f64, f64) {
    let n = samples_ms.len() as f64;
    let mean = samples_ms.iter().sum::<f64>() / n;
    let var = samples_ms.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// f32 gemm wrapper: c = a (m x k) * b (k x n), row-major.
fn gemm_f32(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            0.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

fn gemm_f64(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            0.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// Five Newton-Schulz iterations on a row-major buffer, Gram product on the
/// smaller side (transpose first when rows > cols; the transpose is part of
/// the timed kernel, mirroring what an optimizer step would pay). Plain
/// three-gemm form per iteration: A = X X^T, B = A X, X = 1.5 X - 0.5 B.
macro_rules! ns5_impl {
    ($name:ident, $t:ty, $gemm:ident) => {
        fn $name(rows: usize, cols: usize, input: &[$t], iters: usize) -> $t {
            let (m, n, mut x) = if rows > cols {
                let mut t = vec![0 as $t; rows * cols];
                for i in 0..rows {
                    for j in 0..cols {
                        t[j * rows + i] = input[i * cols + j];
                    }
                }
                (cols, rows, t)
            } else {
                (rows, cols, input.to_vec())
            };
            let mut a = vec![0 as $t; m * m];
            let mut b = vec![0 as $t; m * n];
            let mut xt = vec![0 as $t; n * m];
            for _ in 0..iters {
                for i in 0..m {
                    for j in 0..n {
                        xt[j * m + i] = x[i * n + j];
                    }
                }
                $gemm(m, n, m, &x, &xt, &mut a);
                $gemm(m, m, n, &a, &x, &mut b);
                for (xv, bv) in x.iter_mut().zip(&b) {
                    *xv = 1.5 * *xv - 0.5 * *bv;
                }
            }
            // Checksum defeats dead-code elimination.
            x.iter().copied().sum()
        }
    };
}

ns5_impl!(ns5_f32, f32, gemm_f32);
ns5_impl!(ns5_f64, f64, gemm_f64);

macro_rules! row_norm_impl {
    ($name:ident, $t:ty) => {
        fn $name(rows: usize, cols: usize, input: &[$t], out: &mut [$t]) -> $t {
            for i in 0..rows {
                let row = &input[i * cols..(i + 1) * cols];
                let mut sq = 0 as $t;
                for &v in row {
                    sq += v * v;
                }
                let norm = sq.sqrt();
                let inv = if norm > 0 as $t { 1 as $t / norm } else { 0 as $t };
                for (o, &v) in out[i * cols..(i + 1) * cols].iter_mut().zip(row) {
                    *o = v * inv;
                }
            }
            out.iter().copied().sum()
        }
    };
}

row_norm_impl!(row_norm_f32, f32);
row_norm_impl!(row_norm_f64, f64);

fn time_kernel<F: FnMut() -> f64>(warmup: usize, iters: usize, mut kernel: F) -> (Vec<f64>, f64) {
    let mut sink = 0.0f64;
    for _ in 0..warmup {
        sink += kernel();
    }
    let mut samples = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t0 = Instant::now();
        let s = kernel();
        let dt = t0.elapsed();
        sink += s;
        samples.push(dt.as_nanos() as f64 / 1e6);
    }
    (samples, std::hint::black_box(sink))
}

/// Times both kernels on every shape. Input per shape is a fixed-seed normal
/// matrix prescaled by its Frobenius norm, identical for both methods.
pub fn run_bench(
    shapes: &[BenchShape],
    warmup: usize,
    iters: usize,
    precision: Precision,
) -> Result<Vec<BenchResult>> {
    if iters < 10 {
        return Err(Error::invalid("iters must be >= 10"));
    }
    if shapes.is_empty() {
        return Err(Error::invalid("no shapes requested"));
    }
    let resolution_ns = timer_resolution_ns();
    let mut rng = Rng::from_seed(0x6e6f7261).substream("bench");
    let mut results = Vec::with_capacity(shapes.len() * 2);
    for shape in shapes {
        let raw = Matrix::random_normal(shape.rows, shape.cols, 1.0, &mut rng);
        let scaled = raw.scale(1.0 / raw.norm_fro());
        let (rn_samples, ns_samples) = match precision {
            Precision::F32 => {
                let input: Vec<f32> = scaled.data().iter().map(|&v| v as f32).collect();
                let mut out = vec![0.0f32; input.len()];
                let (rn, _) = time_kernel(warmup, iters, || {
                    row_norm_f32(shape.rows, shape.cols, &input, &mut out) as f64
                });
                let (ns, _) = time_kernel(warmup, iters, || {
                    ns5_f32(shape.rows, shape.cols, &input, 5) as f64
                });
                (rn, ns)
            }
            Precision::F64 => {
                let input = scaled.data().to_vec();
                let mut out = vec![0.0f64; input.len()];
                let (rn, _) = time_kernel(warmup, iters, || {
                    row_norm_f64(shape.rows, shape.cols, &input, &mut out)
                });
                let (ns, _) = time_kernel(warmup, iters, || ns5_f64(shape.rows, shape.cols, &input, 5));
                (rn, ns)
            }
        };
        let (rn_mean, rn_std) = mean_std(&rn_samples);
        let (ns_mean, ns_std) = mean_std(&ns_samples);
        let ratio = ns_mean / rn_mean;
        for (method, mean, std) in [
            (Method::RowNorm, rn_mean, rn_std),
            (Method::Ns5, ns_mean, ns_std),
        ] {
            results.push(BenchResult {
                rows: shape.rows,
                cols: shape.cols,
                scale: shape.scale.to_string(),
                layer: shape.layer.to_string(),
                method,
                mean_ms: mean,
                std_ms: std,
                ratio_vs_rownorm: if method == Method::Ns5 { ratio } else { 1.0 },
                precision,
                warmup,
                iters,
                timer_warning: resolution_ns > 0.01 * mean * 1e6,
            });
        }
    }
    Ok(results)
}

/// Mean NS/row-norm ratio over all shapes tagged with `scale`.
pub fn mean_ratio_for_scale(results: &[BenchResult], scale: &str) -> Option<f64> {
    let ratios: Vec<f64> = results
        .iter()
        .filter(|r| r.method == Method::Ns5 && r.scale == scale)
        .map(|r| r.ratio_vs_rownorm)
        .collect();
    if ratios.is_empty() {
        None
    } else {
        Some(ratios.iter().sum::<f64>() / ratios.len() as f64)
    }
}

pub fn ratio_for_shape(results: &[BenchResult], rows: usize, cols: usize) -> Option<f64> {
    results
        .iter()
        .find(|r| r.method == Method::Ns5 && r.rows == rows && r.cols == cols)
        .map(|r| r.ratio_vs_rownorm)
}

/// Markdown table mirroring the reference layout: scale, shape, layer,
/// row-norm time, NS(5) time, ratio.
pub fn emit_markdown(results: &[BenchResult]) -> Result<String> {
    if results.is_empty() {
        return Err(Error::invalid("no benchmark results to report"));
    }
    let mut out = String::new();
    let precision = results[0].precision;
    out.push_str(&format!(
        "Kernel runtimes ({}, single-threaded CPU, mean of {} iterations after {} warmup).\n\n",
        precision.name(),
        results[0].iters,
        results[0].warmup
    ));
    out.push_str("| Model scale | Matrix shape | Representative layer | Row normalization (ms) | NS(5) (ms) | NS / row-norm |\n");
    out.push_str("|-------------|--------------|----------------------|------------------------|------------|---------------|\n");
    let mut i = 0;
    while i + 1 < results.len() {
        let (rn, ns) = (&results[i], &results[i + 1]);
        if rn.method != Method::RowNorm || ns.method != Method::Ns5 {
            return Err(Error::invalid("results not in row_norm/ns5 pair order"));
        }
        let warn = if rn.timer_warning { " (timer-limited)" } else { "" };
        out.push_str(&format!(
            "| {} | {} x {} | {} | {:.4}{} | {:.4} | {:.2}x |\n",
            rn.scale, rn.rows, rn.cols, rn.layer, rn.mean_ms, warn, ns.mean_ms, ns.ratio_vs_rownorm
        ));
        i += 2;
    }
    Ok(out)
}

pub fn emit_csv(results: &[BenchResult]) -> Result<String> {
    if results.is_empty() {
        return Err(Error::invalid("no benchmark results to report"));
    }
    let mut out = String::from(
        "rows,cols,scale,layer,method,mean_ms,std_ms,ratio_vs_rownorm,precision,warmup,iters,timer_warning\n",
    );
    for r in results {
        out.push_str(&format!(
            "{},{},{},\"{}\",{},{},{},{},{},{},{},{}\n",
            r.rows, r.cols, r.scale, r.layer, r.method.name(), r.mean_ms, r.std_ms,
            r.ratio_vs_rownorm, r.precision.name(), r.warmup, r.iters, r.timer_warning
        ));
    }
    Ok(out)
}

/// Parses [`emit_csv`] output back into results; float fields round-trip
/// exactly because the writer uses shortest round-trip formatting.
pub fn parse_csv(text: &str) -> Result<Vec<BenchResult>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let err = |msg: &str| Error::Config { line: ln + 1, msg: msg.to_string() };
        // The only quoted field is the layer label; split around it.
        let open = line.find('"').ok_or_else(|| err("missing quoted layer"))?;
        let close = line.rfind('"').ok_or_else(|| err("missing quoted layer"))?;
        let head: Vec<&str> = line[..open - 1].split(',').collect();
        let layer = line[open + 1..close].to_string();
        let tail: Vec<&str> = line[close + 2..].split(',').collect();
        if head.len() != 3 || tail.len() != 8 {
            return Err(err("wrong field count"));
        }
        let parse_f = |s: &str| s.parse::<f64>().map_err(|_| err("bad float"));
        let parse_u = |s: &str| s.parse::<usize>().map_err(|_| err("bad count"));
        out.push(BenchResult {
            rows: parse_u(head[0])?,
            cols: parse_u(head[1])?,
            scale: head[2].to_string(),
            layer,
            method: match tail[0] {
                "row_norm" => Method::RowNorm,
                "ns5" => Method::Ns5,
                _ => return Err(err("bad method")),
            },
            mean_ms: parse_f(tail[1])?,
            std_ms: parse_f(tail[2])?,
            ratio_vs_rownorm: parse_f(tail[3])?,
            precision: Precision::parse(tail[4])?,
            warmup: parse_u(tail[5])?,
            iters: parse_u(tail[6])?,
            timer_warning: tail[7] == "true",
        });
    }
    Ok(out)
}
