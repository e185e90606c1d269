//! Command-line entry point.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use stageflow::error::{Error, Result};
use stageflow::execution::{run_episode, trace_to_text, RolloutMode};
use stageflow::harness::{
    build_pipeline, load_demo_dir, load_store, run_eval, run_fewshot, run_perturbed,
    save_demo_dir, save_segmented_dir, save_store, store_task_dir, Pipeline, PipelineConfig,
};
use stageflow::memory::load_library;
use stageflow::policy::PolicyParams;
use stageflow::retrieval::bench_retrieval;
use stageflow::segment::segment_demos;
use stageflow::simenv::{bundled_task, gen_demos};

#[derive(Parser)]
#[command(
    name = "stageflow",
    about = "Stage-memory augmented flow-matching policy: demo generation, training, memory construction and evaluation"
)]
struct Cli {
    /// Master seed; every random quantity is derived from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// TOML config file; flags override individual fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate expert demonstrations for one task.
    GenDemos {
        #[arg(long)]
        task: u32,
        #[arg(long, default_value_t = 40)]
        n: usize,
        #[arg(long, default_value_t = 0.005)]
        noise: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment a demo directory into stages and align all demos to the reference.
    Segment {
        #[arg(long)]
        demos: PathBuf,
        #[arg(long, default_value_t = 0.02)]
        epsilon: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the base flow-matching policy on every demo under a directory.
    TrainBase {
        #[arg(long)]
        demos: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the full memory store (stage prompts + ablation prompts) from config.
    BuildMemory {
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one episode and write its trace.
    Rollout {
        #[arg(long)]
        mode: String,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        library: Option<PathBuf>,
        #[arg(long)]
        task: u32,
        #[arg(long, default_value_t = 0.0)]
        obs_noise: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the evaluation matrix from config (builds the pipeline in-process).
    Eval {
        #[arg(long)]
        out: PathBuf,
    },
    /// Few-shot sweep: rebuild and evaluate with the first N demos per task.
    EvalFewshot {
        #[arg(long, value_delimiter = ',')]
        shots: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Observation-noise sweep over base and full modes.
    EvalPerturbed {
        #[arg(long, value_delimiter = ',')]
        levels: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrieval latency benchmark over library sizes.
    BenchRetrieval {
        #[arg(long)]
        library: PathBuf,
        #[arg(long, default_value_t = 200)]
        n_queries: usize,
        #[arg(long, value_delimiter = ',', default_values_t = [10usize, 20, 40, 80])]
        sizes: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(cli_config: &Option<PathBuf>, seed: u64) -> Result<PipelineConfig> {
    let mut cfg = match cli_config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    // --seed overrides the config only when explicitly nonzero or no file given.
    if cli_config.is_none() || seed != 0 {
        cfg.master_seed = seed;
    }
    Ok(cfg)
}

fn build_from_config(cfg: &PipelineConfig) -> Result<Pipeline> {
    eprintln!(
        "building pipeline: {} task(s), {} demos/task, {} train steps",
        cfg.eval.tasks.len(),
        cfg.demos.per_task,
        cfg.train.steps
    );
    build_pipeline(cfg)
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.config, cli.seed)?;
    match cli.command {
        Command::GenDemos { task, n, noise, out } => {
            let spec = bundled_task(task)?;
            let demos = gen_demos(&spec, n, cfg.master_seed, noise)?;
            save_demo_dir(&demos, &out)?;
            println!("wrote {} demonstrations to {}", demos.len(), out.display());
        }
        Command::Segment { demos, epsilon, out } => {
            let loaded = load_demo_dir(&demos)?;
            let raw: Vec<_> = loaded.into_iter().map(|(d, _)| d).collect();
            let task_id = raw[0].task_id;
            let seg = segment_demos(&raw, epsilon)?;
            save_segmented_dir(&seg, task_id, &out)?;
            println!(
                "segmented {} demos into {} stages (reference demo {}), wrote {}",
                seg.staged.len(),
                seg.segmentation.num_stages(),
                seg.reference_index,
                out.display()
            );
        }
        Command::TrainBase { demos, steps, out } => {
            let mut all = Vec::new();
            collect_demos_recursive(&demos, &mut all)?;
            if all.is_empty() {
                return Err(Error::Preflight(vec![format!(
                    "no demonstrations under {}",
                    demos.display()
                )]));
            }
            let mut tcfg: stageflow::policy::TrainConfig = cfg.train.into();
            if let Some(s) = steps {
                tcfg.steps = s;
            }
            let (params, curve) = stageflow::policy::train_base(
                &all,
                cfg.policy.clone().into(),
                &tcfg,
                cfg.master_seed,
            )?;
            params.save(&out)?;
            println!(
                "trained on {} demos for {} steps (loss {:.4} -> {:.4}), wrote {}",
                all.len(),
                tcfg.steps,
                curve.first().copied().unwrap_or(f64::NAN),
                curve.last().copied().unwrap_or(f64::NAN),
                out.display()
            );
        }
        Command::BuildMemory { policy, out } => {
            // The store is rebuilt end-to-end from config so prompts, labels
            // and the policy always agree; an existing policy file only
            // pins the weights.
            let mut pipeline = build_from_config(&cfg)?;
            if let Some(p) = policy {
                pipeline.params = PolicyParams::load(&p)?;
            }
            save_store(&pipeline, &out)?;
            pipeline.params.save(&out.join("policy.txt"))?;
            println!(
                "wrote memory store for {} task(s) to {}",
                pipeline.tasks.len(),
                out.display()
            );
        }
        Command::Rollout {
            mode,
            policy,
            library,
            task,
            obs_noise,
            out,
        } => {
            let params = PolicyParams::load(&policy)?;
            let spec = bundled_task(task)?;
            let store = library.as_deref();
            let need_store = |what: &str| {
                store.ok_or_else(|| Error::Preflight(vec![format!("--library required for {what}")]))
            };
            let episode_seed = cfg.master_seed;
            let record = match mode.as_str() {
                "base" => run_episode(&params, &RolloutMode::Base, &spec, episode_seed, obs_noise)?,
                "universal" => {
                    let (_, universal, _) =
                        load_store(need_store("universal mode")?, &[task], &[mode.clone()])?;
                    run_episode(
                        &params,
                        &RolloutMode::Universal(&universal.unwrap()),
                        &spec,
                        episode_seed,
                        obs_noise,
                    )?
                }
                "task" => {
                    let (_, _, mut task_prompts) =
                        load_store(need_store("task mode")?, &[task], &[mode.clone()])?;
                    run_episode(
                        &params,
                        &RolloutMode::Task(&task_prompts.remove(0)),
                        &spec,
                        episode_seed,
                        obs_noise,
                    )?
                }
                "stage" | "full" => {
                    let lib = load_library(&store_task_dir(need_store("stage/full mode")?, task))?;
                    let m = if mode == "stage" {
                        RolloutMode::Stage(&lib)
                    } else {
                        RolloutMode::Full(&lib)
                    };
                    run_episode(&params, &m, &spec, episode_seed, obs_noise)?
                }
                other => return Err(Error::Contract(format!("unknown mode `{other}`"))),
            };
            std::fs::write(&out, trace_to_text(&record.trace))?;
            println!(
                "episode finished: success={} partial={} steps={} -> {}",
                record.trace.success,
                record.trace.partial_success,
                record.trace.steps.len(),
                out.display()
            );
        }
        Command::Eval { out } => {
            let pipeline = build_from_config(&cfg)?;
            std::fs::create_dir_all(&out)?;
            let report = run_eval(&cfg, &pipeline, Some(&out))?;
            print!("{}", report.to_text());
            println!("report written to {}", out.display());
        }
        Command::EvalFewshot { shots, out } => {
            std::fs::create_dir_all(&out)?;
            let reports = run_fewshot(&cfg, &shots, Some(&out))?;
            for (shot, report) in &reports {
                println!(
                    "shot {shot}: base {:.1}%, full {:.1}%",
                    100.0 * report.mode_mean("base"),
                    100.0 * report.mode_mean("full")
                );
            }
        }
        Command::EvalPerturbed { levels, out } => {
            let pipeline = build_from_config(&cfg)?;
            std::fs::create_dir_all(&out)?;
            let reports = run_perturbed(&cfg, &pipeline, &levels, Some(&out))?;
            for (level, report) in &reports {
                println!(
                    "noise {level}: base {:.1}%, full {:.1}%",
                    100.0 * report.mode_mean("base"),
                    100.0 * report.mode_mean("full")
                );
            }
        }
        Command::BenchRetrieval {
            library,
            n_queries,
            sizes,
            out,
        } => {
            let lib = load_library(&library)?;
            let rows = bench_retrieval(&lib, &sizes, n_queries, cfg.master_seed)?;
            let mut csv = String::from("num_demos,mean_ms,p95_ms\n");
            for r in &rows {
                csv.push_str(&format!("{},{:.6},{:.6}\n", r.num_demos, r.mean_ms, r.p95_ms));
                println!("N={:<4} mean {:.3} ms  p95 {:.3} ms", r.num_demos, r.mean_ms, r.p95_ms);
            }
            std::fs::write(&out, csv)?;
        }
    }
    Ok(())
}

fn collect_demos_recursive(
    dir: &std::path::Path,
    out: &mut Vec<stageflow::simenv::Demonstration>,
) -> Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_demos_recursive(&path, out)?;
        } else if path
            .file_name()
            .is_some_and(|n| n.to_string_lossy().starts_with("demo_"))
        {
            let (demo, _) = stageflow::simenv::Demonstration::load(&path)?;
            out.push(demo);
        }
    }
    Ok(())
}
