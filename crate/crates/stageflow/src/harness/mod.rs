//! Experiment driver: builds the full pipeline (demos -> segmentation ->
//! base policy -> memory libraries -> ablation prompts) from one config and
//! one master seed, and persists/loads every artifact behind the CLI.

mod eval;

pub use eval::{
    audit_traces, run_eval, run_fewshot, run_perturbed, CellReport, EvalReport, SeriesPoint,
};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::{
    build_library, load_library, load_scoped_prompt, save_library, save_scoped_prompt, tune_prompt,
    MemoryLibrary,
};
use crate::policy::{train_base, Dataset, PolicyConfig, PolicyParams, PromptMatrix, TrainConfig};
use crate::rng;
use crate::segment::{segment_demos, segmentation_to_text, SegmentedTask};
use crate::simenv::{bundled_task, gen_demos, Demonstration, TaskSpec};

fn default_master_seed() -> u64 {
    0
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DemoConfig {
    pub per_task: usize,
    pub noise_std: f64,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            per_task: 40,
            noise_std: 0.005,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainSection {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            steps: t.steps,
            batch: t.batch,
            lr: t.lr,
        }
    }
}

impl From<TrainSection> for TrainConfig {
    fn from(s: TrainSection) -> Self {
        Self {
            steps: s.steps,
            batch: s.batch,
            lr: s.lr,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TuneSection {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for TuneSection {
    fn default() -> Self {
        Self {
            steps: 500,
            batch: 64,
            lr: 1e-3,
        }
    }
}

impl From<TuneSection> for TrainConfig {
    fn from(s: TuneSection) -> Self {
        Self {
            steps: s.steps,
            batch: s.batch,
            lr: s.lr,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct PolicySection {
    pub m: usize,
    pub d: usize,
    pub horizon: usize,
    pub hidden: usize,
    pub max_objects: usize,
    pub num_tasks: usize,
}

impl Default for PolicySection {
    fn default() -> Self {
        let c = PolicyConfig::default();
        Self {
            m: c.m,
            d: c.d,
            horizon: c.horizon,
            hidden: c.hidden,
            max_objects: c.max_objects,
            num_tasks: c.num_tasks,
        }
    }
}

impl From<PolicySection> for PolicyConfig {
    fn from(s: PolicySection) -> Self {
        Self {
            m: s.m,
            d: s.d,
            horizon: s.horizon,
            hidden: s.hidden,
            max_objects: s.max_objects,
            num_tasks: s.num_tasks,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SegmentationSection {
    pub epsilon: f64,
}

impl Default for SegmentationSection {
    fn default() -> Self {
        Self { epsilon: 0.02 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RetrievalSection {
    pub window: usize,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        Self { window: 10 }
    }
}

/// Evaluation matrix: tasks x modes x seeds x rollouts.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct EvalSection {
    pub tasks: Vec<u32>,
    pub modes: Vec<String>,
    pub seeds: usize,
    pub rollouts_per_seed: usize,
    pub obs_noise_std: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            tasks: vec![0, 1, 2],
            modes: crate::execution::MODE_NAMES.iter().map(|s| s.to_string()).collect(),
            seeds: 3,
            rollouts_per_seed: 50,
            obs_noise_std: 0.0,
        }
    }
}

/// Whole-experiment configuration; every field has a bundled default, so an
/// empty TOML file is a valid config.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct PipelineConfig {
    #[serde(default = "default_master_seed")]
    pub master_seed: u64,
    pub demos: DemoConfig,
    pub policy: PolicySection,
    pub train: TrainSection,
    pub segmentation: SegmentationSection,
    pub retrieval: RetrievalSection,
    pub tune: TuneSection,
    pub eval: EvalSection,
}

impl PipelineConfig {
    pub fn from_toml(content: &str) -> Result<Self> {
        toml::from_str(content).map_err(|e| Error::Parse {
            path: "config".into(),
            reason: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn tasks(&self) -> Result<Vec<TaskSpec>> {
        self.eval.tasks.iter().map(|&id| bundled_task(id)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.eval.seeds == 0 || self.eval.rollouts_per_seed == 0 {
            return Err(Error::Contract("eval needs seeds >= 1 and rollouts >= 1".into()));
        }
        if self.eval.tasks.is_empty() || self.eval.modes.is_empty() {
            return Err(Error::Contract("eval needs at least one task and one mode".into()));
        }
        for m in &self.eval.modes {
            if !crate::execution::MODE_NAMES.contains(&m.as_str()) {
                return Err(Error::Contract(format!("unknown mode `{m}`")));
            }
        }
        Ok(())
    }
}

/// Everything needed to roll out any mode.
pub struct Pipeline {
    pub config: PipelineConfig,
    pub tasks: Vec<TaskSpec>,
    pub params: PolicyParams,
    /// Per task, aligned with `tasks`.
    pub libraries: Vec<MemoryLibrary>,
    pub universal_prompt: PromptMatrix,
    /// Per task, aligned with `tasks`.
    pub task_prompts: Vec<PromptMatrix>,
    /// Raw demonstrations per task (kept for few-shot restriction and tests).
    pub raw_demos: Vec<Vec<Demonstration>>,
    pub train_loss_curve: Vec<f64>,
    pub segmented: Vec<SegmentedTask>,
}

/// Marker mixed into tuning seeds for whole-trajectory prompts.
const SCOPE_UNIVERSAL: u64 = u64::MAX;
const SCOPE_TASK: u64 = u64::MAX - 1;

/// Build the full pipeline from scratch. Pure function of the config.
pub fn build_pipeline(config: &PipelineConfig) -> Result<Pipeline> {
    config.validate()?;
    let tasks = config.tasks()?;
    let seed = config.master_seed;
    let pcfg: PolicyConfig = config.policy.clone().into();
    let tcfg: TrainConfig = config.train.into();
    let tune_cfg: TrainConfig = config.tune.into();

    let raw_demos: Vec<Vec<Demonstration>> = tasks
        .iter()
        .map(|t| gen_demos(t, config.demos.per_task, seed, config.demos.noise_std))
        .collect::<Result<_>>()?;

    let all_demos: Vec<Demonstration> = raw_demos.iter().flatten().cloned().collect();
    let (params, train_loss_curve) = train_base(&all_demos, pcfg, &tcfg, seed)?;

    let segmented: Vec<SegmentedTask> = raw_demos
        .iter()
        .map(|demos| segment_demos(demos, config.segmentation.epsilon))
        .collect::<Result<_>>()?;

    let libraries: Vec<MemoryLibrary> = tasks
        .iter()
        .zip(&segmented)
        .map(|(task, seg)| {
            build_library(
                &params,
                &seg.staged,
                &seg.segmentation,
                config.segmentation.epsilon,
                config.retrieval.window,
                &tune_cfg,
                rng::mix(seed, &[rng::TUNE, task.task_id as u64]),
            )
        })
        .collect::<Result<_>>()?;

    // Whole-trajectory ablation prompts reuse the stage-tuning machinery
    // with the stage partition replaced by "all timesteps".
    let universal_samples = Dataset::from_demos(&all_demos, &pcfg)?.samples;
    let (universal_prompt, _) = tune_prompt(
        &params,
        &universal_samples,
        &tune_cfg,
        rng::mix(seed, &[rng::TUNE, SCOPE_UNIVERSAL]),
    )?;
    let task_prompts: Vec<PromptMatrix> = tasks
        .iter()
        .zip(&raw_demos)
        .map(|(task, demos)| {
            let samples = Dataset::from_demos(demos, &pcfg)?.samples;
            let (v, _) = tune_prompt(
                &params,
                &samples,
                &tune_cfg,
                rng::mix(seed, &[rng::TUNE, SCOPE_TASK, task.task_id as u64]),
            )?;
            Ok(v)
        })
        .collect::<Result<_>>()?;

    Ok(Pipeline {
        config: config.clone(),
        tasks,
        params,
        libraries,
        universal_prompt,
        task_prompts,
        raw_demos,
        train_loss_curve,
        segmented,
    })
}

// ---------------------------------------------------------------------------
// On-disk layout helpers shared by the CLI:
//   demos:   <dir>/demo_<i>.txt                          (gen-demos, per task)
//   staged:  <dir>/demo_<i>.txt + segmentation.txt       (segment)
//   policy:  <file>                                      (train-base)
//   store:   <dir>/task_<id>/...  + <dir>/ablation/*.txt (build-memory)
// ---------------------------------------------------------------------------

pub fn save_demo_dir(demos: &[Demonstration], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, d) in demos.iter().enumerate() {
        d.save(&dir.join(format!("demo_{i:04}.txt")), None)?;
    }
    Ok(())
}

/// Load every `demo_*.txt` in a directory, in name order. Returns the demos
/// and any stage labels found alongside them.
pub fn load_demo_dir(dir: &Path) -> Result<Vec<(Demonstration, Option<Vec<usize>>)>> {
    let mut names: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("demo_") && n.ends_with(".txt"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Preflight(vec![format!(
            "no demo_*.txt files in {}",
            dir.display()
        )]));
    }
    names
        .iter()
        .map(|n| Demonstration::load(&dir.join(n)))
        .collect()
}

pub fn save_segmented_dir(seg: &SegmentedTask, task_id: u32, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, staged) in seg.staged.iter().enumerate() {
        staged
            .demo
            .save(&dir.join(format!("demo_{i:04}.txt")), Some(&staged.stage_labels))?;
    }
    std::fs::write(dir.join("segmentation.txt"), segmentation_to_text(seg, task_id))?;
    Ok(())
}

pub fn store_task_dir(store: &Path, task_id: u32) -> std::path::PathBuf {
    store.join(format!("task_{task_id}"))
}

pub fn save_store(pipeline: &Pipeline, store: &Path) -> Result<()> {
    for lib in &pipeline.libraries {
        save_library(lib, &store_task_dir(store, lib.task_id))?;
    }
    let ablation = store.join("ablation");
    std::fs::create_dir_all(&ablation)?;
    save_scoped_prompt(
        &ablation.join("universal.txt"),
        "universal",
        0,
        &pipeline.universal_prompt,
    )?;
    for (task, v) in pipeline.tasks.iter().zip(&pipeline.task_prompts) {
        save_scoped_prompt(
            &ablation.join(format!("task_{}.txt", task.task_id)),
            "task",
            task.task_id,
            v,
        )?;
    }
    Ok(())
}

/// Load the store artifacts needed for the requested modes; reports every
/// missing piece at once.
pub fn load_store(
    store: &Path,
    task_ids: &[u32],
    modes: &[String],
) -> Result<(Vec<MemoryLibrary>, Option<PromptMatrix>, Vec<PromptMatrix>)> {
    let mut missing = Vec::new();
    let needs_lib = modes.iter().any(|m| m == "stage" || m == "full");
    let needs_task = modes.iter().any(|m| m == "task");
    let needs_universal = modes.iter().any(|m| m == "universal");

    let mut libraries = Vec::new();
    if needs_lib {
        for &id in task_ids {
            let dir = store_task_dir(store, id);
            if dir.join("manifest.txt").exists() {
                libraries.push(load_library(&dir)?);
            } else {
                missing.push(format!("library {}", dir.display()));
            }
        }
    }
    let universal = if needs_universal {
        let path = store.join("ablation/universal.txt");
        if path.exists() {
            Some(load_scoped_prompt(&path, "universal")?.1)
        } else {
            missing.push(format!("prompt {}", path.display()));
            None
        }
    } else {
        None
    };
    let mut task_prompts = Vec::new();
    if needs_task {
        for &id in task_ids {
            let path = store.join(format!("ablation/task_{id}.txt"));
            if path.exists() {
                task_prompts.push(load_scoped_prompt(&path, "task")?.1);
            } else {
                missing.push(format!("prompt {}", path.display()));
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::Preflight(missing));
    }
    Ok((libraries, universal, task_prompts))
}

pub fn git_hash() -> String {
    std::process::Command::new("git")
        .args(["rev-parse", "--short", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".to_string())
}
