//! Execution-mode switch for the data-parallel sweeps (seed fans, width
//! sweeps, hyperparameter grids). Kernels themselves stay sequential so
//! per-matrix results are bit-identical in both modes; parallelism is only
//! applied across independent work items, collected in index order.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    Parallel,
}

impl Execution {
    /// Parallel when the `parallel` feature is compiled in, else sequential.
    pub fn default_mode() -> Execution {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

/// Maps `f` over `0..count`, in parallel when requested and available.
/// Results are returned in index order regardless of mode.
pub fn map_indexed<T, F>(mode: Execution, count: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match mode {
        Execution::Sequential => (0..count).map(f).collect(),
        Execution::Parallel => {
            #[cfg(feature = "parallel")]
            {
                (0..count).into_par_iter().map(f).collect()
            }
            #[cfg(not(feature = "parallel"))]
            {
                (0..count).map(f).collect()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree_and_preserve_order() {
        let seq = map_indexed(Execution::Sequential, 100, |i| i * i);
        let par = map_indexed(Execution::Parallel, 100, |i| i * i);
        assert_eq!(seq, par);
        assert_eq!(seq[7], 49);
    }
}
