//! Metrics: importance-sampled negative log-likelihood, kernel maximum mean
//! discrepancy over bit vectors, and recovery error of Ising couplings.

use crate::policy::GFlowNet;
use crate::state::State;
use crate::util::{derive_seed, rng_from_seed};
use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use std::fmt;

/// Row block size for pair sums; fixed so reductions are order-stable.
const ROW_BLOCK: usize = 256;

/// Cap on the negative-log-RMSE recovery score, hit at exact recovery.
pub const J_SCORE_CAP: f64 = 20.0;

#[derive(Clone, Debug)]
pub enum EvalError {
    TooFewSamples { got: usize, need: usize },
    ShapeMismatch { a: Vec<usize>, b: Vec<usize> },
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::TooFewSamples { got, need } => {
                write!(f, "need at least {need} samples, got {got}")
            }
            EvalError::ShapeMismatch { a, b } => {
                write!(f, "matrix shapes {a:?} and {b:?} do not match")
            }
        }
    }
}

impl std::error::Error for EvalError {}

/// One evaluated metric with its sampling setup.
#[derive(Clone, Debug)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub stderr: f64,
    /// Number of test points (NLL) or samples per side and repeat (MMD).
    pub n: usize,
    /// Backward samples per point for NLL; 0 when not applicable.
    pub m: usize,
    pub reps: usize,
    pub seed: u64,
}

impl MetricReport {
    pub fn csv_header() -> &'static str {
        "metric,value,stderr,n,M,seed"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.metric, self.value, self.stderr, self.n, self.m, self.seed
        )
    }
}

/// Mean negative log-likelihood of a test set under the sampler, estimated
/// with `m` backward trajectories per point. The standard error is over test
/// points.
pub fn nll(gfn: &GFlowNet, test_set: &[State], m: usize, seed: u64) -> MetricReport {
    assert!(!test_set.is_empty(), "test set must be non-empty");
    let log_pts = gfn.estimate_log_pt_batch(test_set, m, seed);
    let values: Vec<f64> = log_pts.iter().map(|lp| -lp).collect();
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)
    } else {
        0.0
    };
    MetricReport {
        metric: "nll".into(),
        value: mean,
        stderr: (var / n as f64).sqrt(),
        n,
        m,
        reps: 1,
        seed,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MmdKernel {
    /// `k(x, y) = exp(-bandwidth * hamming(x, y))`.
    ExpHamming { bandwidth: f64 },
    /// `k(x, y) = <2x-1, 2y-1> / D`.
    Linear,
}

/// Bit-packed states for fast pairwise Hamming distances.
struct Packed {
    words: Vec<u64>,
    words_per_row: usize,
    d: usize,
}

impl Packed {
    fn new(xs: &[State]) -> Packed {
        let d = xs.first().map_or(0, |x| x.dim());
        let wpr = d.div_ceil(64).max(1);
        let mut words = vec![0u64; xs.len() * wpr];
        for (i, x) in xs.iter().enumerate() {
            for (pos, b) in x.to_bits().into_iter().enumerate() {
                if b {
                    words[i * wpr + pos / 64] |= 1 << (pos % 64);
                }
            }
        }
        Packed { words, words_per_row: wpr, d }
    }

    fn hamming(&self, i: usize, other: &Packed, j: usize) -> u32 {
        let a = &self.words[i * self.words_per_row..(i + 1) * self.words_per_row];
        let b = &other.words[j * other.words_per_row..(j + 1) * other.words_per_row];
        a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
    }
}

fn kernel_value(kernel: MmdKernel, hamming: u32, d: usize) -> f64 {
    match kernel {
        MmdKernel::ExpHamming { bandwidth } => (-bandwidth * hamming as f64).exp(),
        MmdKernel::Linear => (d as f64 - 2.0 * hamming as f64) / d as f64,
    }
}

/// Mean kernel value over the full `|xs| x |ys|` grid, diagonal included.
fn mean_kernel(xs: &Packed, nx: usize, ys: &Packed, ny: usize, kernel: MmdKernel) -> f64 {
    let blocks: Vec<usize> = (0..nx).step_by(ROW_BLOCK).collect();
    let partial: Vec<f64> = crate::util::eval_pool().install(|| {
        blocks
            .par_iter()
            .map(|&lo| {
                let hi = (lo + ROW_BLOCK).min(nx);
                let mut acc = 0.0;
                for i in lo..hi {
                    for j in 0..ny {
                        acc += kernel_value(kernel, xs.hamming(i, ys, j), xs.d);
                    }
                }
                acc
            })
            .collect()
    });
    partial.iter().sum::<f64>() / (nx as f64 * ny as f64)
}

/// Biased (V-statistic) squared MMD between two sample sets; never negative
/// and exactly zero for identical multisets.
pub fn mmd2(xs: &[State], ys: &[State], kernel: MmdKernel) -> Result<f64, EvalError> {
    if xs.len() < 2 || ys.len() < 2 {
        return Err(EvalError::TooFewSamples { got: xs.len().min(ys.len()), need: 2 });
    }
    let px = Packed::new(xs);
    let py = Packed::new(ys);
    let kxx = mean_kernel(&px, xs.len(), &px, xs.len(), kernel);
    let kyy = mean_kernel(&py, ys.len(), &py, ys.len(), kernel);
    let kxy = mean_kernel(&px, xs.len(), &py, ys.len(), kernel);
    Ok(kxx + kyy - 2.0 * kxy)
}

/// Repetition protocol: the mean squared MMD over `reps` repeats, each
/// comparing `per_rep` fresh sampler draws against `per_rep` points drawn
/// from the ground-truth set.
pub fn mmd_protocol(
    gfn: &GFlowNet,
    ground_truth: &[State],
    kernel: MmdKernel,
    reps: usize,
    per_rep: usize,
    seed: u64,
) -> Result<MetricReport, EvalError> {
    if ground_truth.len() < 2 {
        return Err(EvalError::TooFewSamples { got: ground_truth.len(), need: 2 });
    }
    let mut values = Vec::with_capacity(reps);
    for rep in 0..reps {
        let mut rng = rng_from_seed(derive_seed(seed, rep as u64));
        let model_side = sample_terminals(gfn, per_rep, derive_seed(seed, 1000 + rep as u64));
        let data_side: Vec<State> = (0..per_rep)
            .map(|_| ground_truth[rng.random_range(0..ground_truth.len())].clone())
            .collect();
        values.push(mmd2(&model_side, &data_side, kernel)?);
    }
    let mean = values.iter().sum::<f64>() / reps as f64;
    let var = if reps > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps as f64 - 1.0)
    } else {
        0.0
    };
    let name = match kernel {
        MmdKernel::ExpHamming { .. } => "mmd-exp",
        MmdKernel::Linear => "mmd-linear",
    };
    Ok(MetricReport {
        metric: name.into(),
        value: mean,
        stderr: (var / reps as f64).sqrt(),
        n: per_rep,
        m: 0,
        reps,
        seed,
    })
}

/// Draw terminal states from the forward policy, chunked deterministically.
pub fn sample_terminals(gfn: &GFlowNet, n: usize, seed: u64) -> Vec<State> {
    const CHUNK: usize = 1024;
    let jobs: Vec<(usize, usize)> = (0..n)
        .step_by(CHUNK)
        .map(|lo| (lo, (lo + CHUNK).min(n)))
        .collect();
    let batches: Vec<Vec<State>> = crate::util::eval_pool().install(|| {
        jobs.par_iter()
            .enumerate()
            .map(|(ci, &(lo, hi))| {
                let mut rng = rng_from_seed(derive_seed(seed, ci as u64));
                gfn.sample_forward_batch(hi - lo, &mut rng, &crate::policy::ExplorationCfg::none())
                    .into_iter()
                    .map(|t| t.last().clone())
                    .collect()
            })
            .collect()
    });
    batches.into_iter().flatten().collect()
}

/// Negative log-RMSE between coupling matrices over strictly
/// upper-triangular entries, capped at [`J_SCORE_CAP`]. Higher is better.
pub fn j_recovery_score(j_true: &Array2<f64>, j_learned: &Array2<f64>) -> Result<f64, EvalError> {
    if j_true.shape() != j_learned.shape() || j_true.nrows() != j_true.ncols() {
        return Err(EvalError::ShapeMismatch {
            a: j_true.shape().to_vec(),
            b: j_learned.shape().to_vec(),
        });
    }
    let d = j_true.nrows();
    let mut sq_sum = 0.0;
    let mut count = 0usize;
    for i in 0..d {
        for j in (i + 1)..d {
            let diff = j_true[[i, j]] - j_learned[[i, j]];
            sq_sum += diff * diff;
            count += 1;
        }
    }
    if count == 0 {
        return Err(EvalError::TooFewSamples { got: 0, need: 1 });
    }
    let rmse = (sq_sum / count as f64).sqrt();
    if rmse == 0.0 {
        return Ok(J_SCORE_CAP);
    }
    Ok((-rmse.ln()).min(J_SCORE_CAP))
}

/// Pearson correlation between the strictly upper-triangular entries of two
/// square matrices.
pub fn pearson_upper_tri(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64, EvalError> {
    if a.shape() != b.shape() || a.nrows() != a.ncols() {
        return Err(EvalError::ShapeMismatch { a: a.shape().to_vec(), b: b.shape().to_vec() });
    }
    let d = a.nrows();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for i in 0..d {
        for j in (i + 1)..d {
            xs.push(a[[i, j]]);
            ys.push(b[[i, j]]);
        }
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx).powi(2);
        vy += (y - my).powi(2);
    }
    Ok(cov / (vx.sqrt() * vy.sqrt()).max(f64::MIN_POSITIVE))
}
