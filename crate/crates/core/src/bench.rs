//! Per-step latency and state-size measurements on a random stream.

use crate::error::{Error, Result};
use crate::model::SimOn;
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    /// Stream length per run.
    pub t: usize,
    pub runs: usize,
    /// Untimed steps before each run.
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            t: 1000,
            runs: 5,
            warmup: 50,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p99_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub runs: Vec<RunStats>,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p99_ms: f64,
    /// Coefficient of variation of the per-run median latency.
    pub cv: f64,
    /// `(t, bytes)` samples of the stream state size.
    pub state_bytes: Vec<(usize, usize)>,
    pub param_count: usize,
}

impl BenchReport {
    pub fn state_is_constant(&self, from_t: usize) -> bool {
        let tail: Vec<usize> = self.state_bytes.iter().filter(|(t, _)| *t >= from_t).map(|&(_, b)| b).collect();
        tail.windows(2).all(|w| w[0] == w[1])
    }
}

/// Nearest-rank percentile of sorted values.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = (q / 100.0 * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn coefficient_of_variation(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    var.sqrt() / mean
}

fn stats(mut ms: Vec<f64>) -> RunStats {
    ms.sort_by(f64::total_cmp);
    RunStats {
        mean_ms: ms.iter().sum::<f64>() / ms.len() as f64,
        p50_ms: percentile(&ms, 50.0),
        p99_ms: percentile(&ms, 99.0),
    }
}

pub fn run_bench(model: &SimOn, cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.t == 0 || cfg.runs == 0 {
        return Err(Error::Config("bench needs t > 0 and runs > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d_in = model.config.d_in;
    let features: Vec<Vec<f64>> = (0..cfg.t + cfg.warmup)
        .map(|_| Tensor::randn(&[d_in], 1.0, &mut rng).into_data())
        .collect();
    let k = model.config.k;
    let mut probes: Vec<usize> = vec![1, k, k + 1, k + 2, cfg.t / 2, cfg.t];
    probes.retain(|&t| t >= 1 && t <= cfg.t);
    probes.sort_unstable();
    probes.dedup();

    let mut runs = Vec::with_capacity(cfg.runs);
    let mut all = Vec::with_capacity(cfg.runs * cfg.t);
    let mut state_bytes = Vec::new();
    for run in 0..cfg.runs {
        let mut state = model.init_state();
        for f in &features[..cfg.warmup] {
            let (c, q) = model.forward_step(&state, f, None)?;
            state.advance(&q, &c, model)?;
        }
        // measure state size on a fresh stream aligned with t
        let mut fresh = model.init_state();
        let mut ms = Vec::with_capacity(cfg.t);
        for f in &features[cfg.warmup..] {
            let start = Instant::now();
            let (c, q) = model.forward_step(&state, f, None)?;
            state.advance(&q, &c, model)?;
            ms.push(start.elapsed().as_secs_f64() * 1e3);
            if run == 0 {
                if probes.contains(&fresh.t()) {
                    state_bytes.push((fresh.t(), fresh.memory_bytes()));
                }
                let (c, q) = model.forward_step(&fresh, f, None)?;
                fresh.advance(&q, &c, model)?;
            }
        }
        if ms.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("latency measurement".into()));
        }
        all.extend_from_slice(&ms);
        runs.push(stats(ms));
    }
    let overall = stats(all);
    let medians: Vec<f64> = runs.iter().map(|r| r.p50_ms).collect();
    Ok(BenchReport {
        cv: coefficient_of_variation(&medians),
        runs,
        mean_ms: overall.mean_ms,
        p50_ms: overall.p50_ms,
        p99_ms: overall.p99_ms,
        state_bytes,
        param_count: model.param_count(),
    })
}
