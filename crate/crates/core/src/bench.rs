//! Wall-clock overhead of computing effective attention on top of a plain
//! forward pass.

use std::hint::black_box;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention_sim::{forward, gaussian_matrix, SublayerConfig, SublayerWeights};
use crate::decomposition::{decompose, HeadRecord};
use crate::error::{Error, Result};

pub const MIN_WARMUP: usize = 5;
pub const MIN_ITERATIONS: usize = 20;

/// Published evaluation time for RTE: 0:29 with standard attention, 0:58
/// with effective attention. Reported alongside measurements for context.
pub const REFERENCE_STANDARD_SECS: f64 = 29.0;
pub const REFERENCE_EFFECTIVE_SECS: f64 = 58.0;

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub sublayer: SublayerConfig,
    pub warmup: usize,
    pub iterations: usize,
    pub rel_tol: f64,
}

impl BenchConfig {
    pub fn new(sublayer: SublayerConfig) -> Self {
        Self { sublayer, warmup: MIN_WARMUP, iterations: MIN_ITERATIONS, rel_tol: crate::linalg::DEFAULT_REL_TOL_F64 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ReferenceTiming {
    pub task: &'static str,
    pub standard_secs: f64,
    pub effective_secs: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub d_s: usize,
    pub d_model: usize,
    pub d_v: usize,
    pub warmup: usize,
    pub iterations: usize,
    pub forward_median_secs: f64,
    pub forward_decompose_median_secs: f64,
    /// `forward_decompose_median_secs / forward_median_secs`
    pub ratio: f64,
    pub reference: ReferenceTiming,
}

pub fn run_overhead_benchmark(cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.sublayer.validate()?;
    if cfg.warmup < MIN_WARMUP || cfg.iterations < MIN_ITERATIONS {
        return Err(Error::arg(format!(
            "benchmark needs at least {MIN_WARMUP} warmup and {MIN_ITERATIONS} measured iterations"
        )));
    }
    let s = &cfg.sublayer;
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let weights = SublayerWeights::random(s, &mut rng);
    let z_prev = gaussian_matrix(s.d_s, s.d_model, 1.0, &mut rng);

    let plain = || -> Result<()> {
        black_box(forward(black_box(&z_prev), &weights)?);
        Ok(())
    };
    let with_decomposition = || -> Result<()> {
        let pass = forward(black_box(&z_prev), &weights)?;
        let head = HeadRecord::new(0, 0, pass.a, pass.v, None)?;
        black_box(decompose(&head, cfg.rel_tol)?);
        Ok(())
    };

    for _ in 0..cfg.warmup {
        plain()?;
        with_decomposition()?;
    }
    let mut plain_times = Vec::with_capacity(cfg.iterations);
    let mut full_times = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        plain_times.push(time(plain)?);
        full_times.push(time(with_decomposition)?);
    }

    let forward_median_secs = median(&mut plain_times).as_secs_f64();
    let forward_decompose_median_secs = median(&mut full_times).as_secs_f64();
    Ok(BenchReport {
        d_s: s.d_s,
        d_model: s.d_model,
        d_v: s.d_v,
        warmup: cfg.warmup,
        iterations: cfg.iterations,
        forward_median_secs,
        forward_decompose_median_secs,
        ratio: forward_decompose_median_secs / forward_median_secs,
        reference: ReferenceTiming {
            task: "RTE",
            standard_secs: REFERENCE_STANDARD_SECS,
            effective_secs: REFERENCE_EFFECTIVE_SECS,
            ratio: REFERENCE_EFFECTIVE_SECS / REFERENCE_STANDARD_SECS,
        },
    })
}

fn time(f: impl Fn() -> Result<()>) -> Result<Duration> {
    let start = Instant::now();
    f()?;
    Ok(start.elapsed())
}

fn median(xs: &mut [Duration]) -> Duration {
    xs.sort_unstable();
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2
    }
}
