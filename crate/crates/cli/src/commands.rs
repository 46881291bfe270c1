use std::path::Path;
use std::time::Instant;

use serde::Serialize;
use serde_json::json;
use ssr_core::analysis::{overhead_benchmark, write_bench_csv, BenchConfig, MIN_REPETITIONS};
use ssr_core::io::{read_csv_matrix, MatrixJson};
use ssr_core::moe::{
    evaluate, make_synthetic_task, train_observed, MoEBlock, RecordWriter, SyntheticTask, TrainOptions,
};
use ssr_core::ot::CostMode;
use ssr_core::routing::{ssr_route_detailed, BranchOverride, GatingScores, Mode, RouterConfig};
use ssr_core::verify::{property_names, Verifier};
use ssr_core::{seeded_rng, Error};

use crate::config::{ExperimentConfig, RunConfig};
use crate::output::{ensure_dir, write_atomic};
use crate::{CostArg, Failure, ForceArg, ModeArg, RouteArgs, EXIT_VERIFY};

pub fn verify(filter: Option<&str>, seed: u64) -> Result<(), Failure> {
    let results = Verifier {
        seed,
        ..Verifier::default()
    }
    .run(filter);
    if results.is_empty() {
        return Err(Failure::input(format!(
            "no property matches {:?}; known: {}",
            filter.unwrap_or(""),
            property_names().join(", ")
        )));
    }
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    for r in &results {
        println!(
            "{:<width$}  {}  {:>6} cases  {:>9.1} ms",
            r.name,
            if r.passed { "pass" } else { "FAIL" },
            r.cases,
            r.elapsed.as_secs_f64() * 1e3
        );
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} passed, {failed} failed", results.len() - failed);
    match results.iter().find_map(|r| r.counterexample.as_ref()) {
        None => Ok(()),
        Some(cx) => Err(Failure {
            code: EXIT_VERIFY,
            message: format!("{failed} properties failed; first: {}", cx.property),
            report: serde_json::to_string(cx).ok(),
        }),
    }
}

/// One entry of `summary.json`.
#[derive(Debug, Serialize)]
struct RunSummary {
    name: String,
    failed: bool,
    /// "NaN" for numeric blow-ups (non-finite loss or solver overflow).
    failure: Option<String>,
    detail: Option<String>,
    steps_completed: usize,
    /// Inference-mode MSE over the whole task.
    final_loss: Option<f64>,
    final_train_loss: Option<f64>,
    load_entropy: Option<f64>,
    load_cv: Option<f64>,
    sinkhorn_steps: usize,
    wall_time_ms: f64,
    csv: String,
}

fn run_one(config: &ExperimentConfig, task: &SyntheticTask, run: &RunConfig) -> Result<RunSummary, Failure> {
    let start = Instant::now();
    let seed = config.run_seed(run);
    let t = &config.task;
    let mut block = MoEBlock::new(
        t.d,
        t.experts,
        t.hidden,
        run.gate_init_scale,
        run.router.clone(),
        &mut seeded_rng(seed),
    )?;
    let options = TrainOptions {
        steps: t.steps,
        learning_rate: t.learning_rate,
        regularizer: run.regularizer,
        coefficient: run.coefficient,
        batch_size: t.batch_size,
        seed,
    };

    let mut writer = RecordWriter::new(Vec::new())?;
    let mut write_error = None;
    let mut completed = 0;
    let mut last_loss = None;
    let mut sinkhorn_steps = 0;
    let outcome = train_observed(&mut block, task, &options, |r| {
        completed += 1;
        last_loss = Some(r.loss);
        if r.branch == ssr_core::routing::Branch::Sinkhorn {
            sinkhorn_steps += 1;
        }
        if write_error.is_none() {
            write_error = writer.write(r).err();
        }
    });
    if let Some(e) = write_error {
        return Err(e.into());
    }
    let csv_name = format!("{}.csv", run.name);
    write_atomic(&config.output_dir.join(&csv_name), &writer.finish()?)?;

    let mut summary = RunSummary {
        name: run.name.clone(),
        failed: false,
        failure: None,
        detail: None,
        steps_completed: completed,
        final_loss: None,
        final_train_loss: last_loss,
        load_entropy: None,
        load_cv: None,
        sinkhorn_steps,
        wall_time_ms: 0.0,
        csv: csv_name,
    };
    match outcome {
        Ok(_) => {
            let eval = evaluate(&block, task)?;
            summary.final_loss = Some(eval.loss);
            summary.load_entropy = Some(eval.load.topk_entropy);
            summary.load_cv = Some(eval.load.topk_cv);
        }
        Err(e) if e.is_numeric() => {
            summary.failed = true;
            summary.failure = Some("NaN".into());
            summary.detail = Some(e.to_string());
        }
        Err(e) => return Err(e.into()),
    }
    summary.wall_time_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(summary)
}

pub fn train(path: &Path) -> Result<(), Failure> {
    let config = ExperimentConfig::load(path)?;
    let task = make_synthetic_task(&config.task_spec())?;
    ensure_dir(&config.output_dir)?;

    // Runs are independent: each owns its block, generator and CSV.
    let results: Vec<Result<RunSummary, Failure>> = std::thread::scope(|s| {
        let handles: Vec<_> = config
            .runs
            .iter()
            .map(|run| s.spawn(|| run_one(&config, &task, run)))
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(Failure::input("training thread panicked")))
            })
            .collect()
    });
    let runs = results.into_iter().collect::<Result<Vec<_>, _>>()?;

    for r in &runs {
        match (&r.failure, r.final_loss) {
            (Some(f), _) => println!("{:<20} failed ({f}) after {} steps", r.name, r.steps_completed),
            (None, Some(loss)) => println!(
                "{:<20} loss {loss:.6}  entropy {:.4}  cv {:.4}  {:.0} ms",
                r.name,
                r.load_entropy.unwrap_or(f64::NAN),
                r.load_cv.unwrap_or(f64::NAN),
                r.wall_time_ms
            ),
            (None, None) => unreachable!("successful runs are evaluated"),
        }
    }
    let summary = json!({ "seed": config.seed, "task": config.task, "runs": runs });
    let text = serde_json::to_string_pretty(&summary).map_err(|e| Failure::input(e.to_string()))?;
    write_atomic(&config.output_dir.join("summary.json"), text.as_bytes())?;
    println!("wrote {}", config.output_dir.display());
    Ok(())
}

pub fn bench(path: &Path) -> Result<(), Failure> {
    let config = ExperimentConfig::load(path)?;
    let mut options = config.bench.clone();
    options.seed = config.seed;
    if options.repetitions < MIN_REPETITIONS {
        eprintln!(
            "warning: {} repetitions is below {MIN_REPETITIONS}; means will be noisy",
            options.repetitions
        );
    }
    let configs: Vec<BenchConfig> = config
        .runs
        .iter()
        .map(|r| BenchConfig {
            id: r.name.clone(),
            router: r.router.clone(),
        })
        .collect();
    let results = overhead_benchmark(&configs, &options)?;
    ensure_dir(&config.output_dir)?;

    let mut csv = Vec::new();
    write_bench_csv(&mut csv, &results)?;
    write_atomic(&config.output_dir.join("bench.csv"), &csv)?;
    let doc = json!({ "options": options, "results": results });
    let text = serde_json::to_string_pretty(&doc).map_err(|e| Failure::input(e.to_string()))?;
    write_atomic(&config.output_dir.join("bench.json"), text.as_bytes())?;

    for r in &results {
        println!(
            "{:<20} p={:<6} {:>9.4} ms  ratio {:.3}  sinkhorn steps {}",
            r.config_id, r.p, r.mean_ms, r.overhead_ratio, r.sinkhorn_steps
        );
    }
    println!("wrote {}", config.output_dir.display());
    Ok(())
}

fn route_config(args: &RouteArgs) -> RouterConfig {
    let d = RouterConfig::default();
    RouterConfig {
        k: args.k.unwrap_or(d.k),
        p: args.p.unwrap_or(d.p),
        xi: args.xi.unwrap_or(d.xi),
        cost_mode: match args.cost {
            Some(CostArg::Linear) => CostMode::Linear,
            Some(CostArg::Softmax) => CostMode::Softmax,
            None => d.cost_mode,
        },
        alpha_noise: args.alpha_noise.unwrap_or(d.alpha_noise),
        sigma: args.sigma.unwrap_or(d.sigma),
        mode: match args.mode {
            Some(ModeArg::Train) => Mode::Train,
            Some(ModeArg::Inference) => Mode::Inference,
            None => d.mode,
        },
        branch_override: args.force_branch.map(|f| match f {
            ForceArg::Softmax => BranchOverride::ForceSoftmax,
            ForceArg::Sinkhorn => BranchOverride::ForceSinkhorn,
        }),
        stabilized: !args.naive,
        seed: args.seed,
        ..d
    }
}

pub fn route(args: &RouteArgs) -> Result<(), Failure> {
    let file = std::fs::File::open(&args.scores)
        .map_err(|e| Failure::input(format!("cannot read {}: {e}", args.scores.display())))?;
    let values = read_csv_matrix(std::io::BufReader::new(file)).map_err(|e| match e {
        Error::Io(io) => Failure::input(format!("{}: {io}", args.scores.display())),
        other => Failure::input(format!("{}: {other}", args.scores.display())),
    })?;
    let scores = GatingScores::new(values)?;
    let config = route_config(args);
    let outcome = ssr_route_detailed(&scores, &config, &mut seeded_rng(args.seed))?;

    let text = if args.plan {
        let (plan, diagnostics) = match &outcome.transport {
            Some((p, d)) => (Some(MatrixJson::from_array(&p.values)), Some(d)),
            None => (None, None),
        };
        serde_json::to_string(&json!({
            "decision": outcome.decision,
            "plan": plan,
            "diagnostics": diagnostics,
        }))
    } else {
        serde_json::to_string(&outcome.decision)
    };
    println!("{}", text.map_err(|e| Failure::input(e.to_string()))?);
    Ok(())
}
