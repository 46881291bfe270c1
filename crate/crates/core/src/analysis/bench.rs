use std::io::Write;
use std::time::Instant;

use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::moe::{moe_backward, moe_forward, MoEBlock, TokenBatch};
use crate::ot::CostMode;
use crate::routing::{Branch, RouterConfig};
use crate::{seeded_rng, Error, Result};

/// Fewer repetitions than this give unstable means.
pub const MIN_REPETITIONS: usize = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub id: String,
    pub router: RouterConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchOptions {
    pub m: usize,
    pub n: usize,
    pub d: usize,
    pub h: usize,
    pub repetitions: usize,
    /// Discarded steps per config before timing starts.
    pub warmup: usize,
    /// Number of contiguous groups for the median-of-means estimate.
    pub groups: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            m: 256,
            n: 16,
            d: 16,
            h: 32,
            repetitions: 1000,
            warmup: 20,
            groups: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchResult {
    pub config_id: String,
    pub p: f64,
    pub xi: f64,
    pub cost_mode: CostMode,
    /// Median of group means of the per-step time.
    pub mean_ms: f64,
    pub std_ms: f64,
    pub overhead_ratio: f64,
    /// Timed steps that took the Sinkhorn branch.
    pub sinkhorn_steps: usize,
}

fn is_vanilla(c: &RouterConfig) -> bool {
    c.p == 0.0 && c.branch_override.is_none()
}

fn median_of_means(samples: &[f64], groups: usize) -> f64 {
    let groups = groups.clamp(1, samples.len());
    let size = samples.len() / groups;
    let mut means: Vec<f64> = (0..groups)
        .map(|g| {
            let end = if g + 1 == groups { samples.len() } else { (g + 1) * size };
            let chunk = &samples[g * size..end];
            chunk.iter().sum::<f64>() / chunk.len() as f64
        })
        .collect();
    means.sort_by(f64::total_cmp);
    let mid = means.len() / 2;
    if means.len() % 2 == 1 {
        means[mid]
    } else {
        0.5 * (means[mid - 1] + means[mid])
    }
}

/// Times forward + backward of one block under several router configs.
/// Configs are interleaved step by step, and each one draws from its
/// own copy of the same seeded stream, so for a shared seed the Sinkhorn steps
/// of a smaller `p` are a subset of those of a larger one. Overheads are
/// relative to the first vanilla (`p = 0`, no override) config; one is
/// prepended under the id `vanilla` when absent.
pub fn overhead_benchmark(configs: &[BenchConfig], options: &BenchOptions) -> Result<Vec<BenchResult>> {
    if configs.is_empty() {
        return Err(Error::invalid("no router configs to benchmark"));
    }
    if options.repetitions == 0 {
        return Err(Error::invalid("repetitions must be >= 1"));
    }
    let mut configs = configs.to_vec();
    let baseline = match configs.iter().position(|c| is_vanilla(&c.router)) {
        Some(i) => i,
        None => {
            let k = configs[0].router.k;
            configs.insert(
                0,
                BenchConfig {
                    id: "vanilla".into(),
                    router: RouterConfig::vanilla(k),
                },
            );
            0
        }
    };

    let mut data_rng = seeded_rng(options.seed);
    let x = Array2::from_shape_simple_fn((options.m, options.d), || {
        let z: f64 = StandardNormal.sample(&mut data_rng);
        z
    });
    let upstream = Array2::from_shape_simple_fn((options.m, options.d), || {
        let z: f64 = StandardNormal.sample(&mut data_rng);
        z / (options.m * options.d) as f64
    });
    let batch = TokenBatch::new(x, None)?;

    // Steps never update parameters, so one block serves every config; only
    // the router settings are swapped in. This keeps memory layout identical
    // across configs.
    let mut block = MoEBlock::new(
        options.d,
        options.n,
        options.h,
        1.0,
        configs[0].router.clone(),
        &mut seeded_rng(options.seed.wrapping_add(1)),
    )?;
    for c in &configs {
        c.router.validate(Some(options.n))?;
    }
    let mut rngs: Vec<_> = configs
        .iter()
        .map(|_| seeded_rng(options.seed.wrapping_add(2)))
        .collect();
    let mut times = vec![Vec::with_capacity(options.repetitions); configs.len()];
    let mut sinkhorn_steps = vec![0usize; configs.len()];

    for rep in 0..options.warmup + options.repetitions {
        // Rotate the starting config so none always runs first.
        for offset in 0..configs.len() {
            let c = (rep + offset) % configs.len();
            block.config = configs[c].router.clone();
            let start = Instant::now();
            let forward = moe_forward(&block, &batch, &mut rngs[c])?;
            let grads = moe_backward(&block, &batch, &forward, &upstream)?;
            let elapsed = start.elapsed().as_secs_f64() * 1e3;
            std::hint::black_box(&grads);
            if rep >= options.warmup {
                times[c].push(elapsed);
                if forward.decision.branch == Branch::Sinkhorn {
                    sinkhorn_steps[c] += 1;
                }
            }
        }
    }

    let means: Vec<f64> = times.iter().map(|t| median_of_means(t, options.groups)).collect();
    Ok(configs
        .iter()
        .enumerate()
        .map(|(c, cfg)| {
            let t = &times[c];
            let avg = t.iter().sum::<f64>() / t.len() as f64;
            let var = t.iter().map(|v| (v - avg).powi(2)).sum::<f64>() / (t.len().max(2) - 1) as f64;
            BenchResult {
                config_id: cfg.id.clone(),
                p: cfg.router.p,
                xi: cfg.router.xi,
                cost_mode: cfg.router.cost_mode,
                mean_ms: means[c],
                std_ms: var.sqrt(),
                overhead_ratio: means[c] / means[baseline],
                sinkhorn_steps: sinkhorn_steps[c],
            }
        })
        .collect())
}

pub const BENCH_CSV_HEADER: [&str; 7] = [
    "config_id",
    "p",
    "xi",
    "cost_mode",
    "mean_ms",
    "std_ms",
    "overhead_ratio",
];

pub fn write_bench_csv<W: Write>(writer: W, results: &[BenchResult]) -> Result<()> {
    let mut csv = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    let err = |e: csv::Error| Error::Parse(e.to_string());
    csv.write_record(BENCH_CSV_HEADER).map_err(err)?;
    for r in results {
        csv.write_record([
            r.config_id.clone(),
            r.p.to_string(),
            r.xi.to_string(),
            r.cost_mode.to_string(),
            r.mean_ms.to_string(),
            r.std_ms.to_string(),
            r.overhead_ratio.to_string(),
        ])
        .map_err(err)?;
    }
    csv.flush()?;
    Ok(())
}
