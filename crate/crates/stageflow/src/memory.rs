//! Stage memory: soft prompts tuned against the frozen policy, bundled with
//! the demonstrations that produced them.
//!
//! One soft prompt per stage is optimized on the flow-matching objective
//! restricted to that stage's timesteps; the backbone never receives a
//! gradient (asserted by checksum). Prompts start at zero, so an untuned
//! library reproduces the base policy exactly.

use std::path::Path;

use crate::error::{Error, Result};
use crate::policy::{
    draw_batch, sample_loss_grad, Adam, PolicyParams, PromptMatrix, Sample, TrainConfig,
};
use crate::rng;
use crate::segment::{StageSegmentation, StagedDemonstration};
use crate::simenv::Demonstration;
use crate::textio::{TextReader, TextWriter};

/// Learnable token offsets for one task stage.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftPrompt {
    pub v: PromptMatrix,
    pub stage: usize,
    pub task_id: u32,
}

/// Element-wise sum of base and soft prompt tokens.
pub fn compose_prompt(base: &PromptMatrix, soft: &SoftPrompt) -> Result<PromptMatrix> {
    if base.shape() != soft.v.shape() {
        return Err(Error::Contract(format!(
            "prompt shapes differ: base {:?}, soft {:?}",
            base.shape(),
            soft.v.shape()
        )));
    }
    let (m, d) = base.shape();
    let data = base
        .data()
        .iter()
        .zip(soft.v.data())
        .map(|(b, v)| b + v)
        .collect();
    PromptMatrix::new(m, d, data)
}

/// Configuration echoed into the library manifest.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LibraryConfig {
    pub m: usize,
    pub d: usize,
    pub horizon: usize,
    /// Retrieval window length W.
    pub window: usize,
    pub epsilon_rdp: f64,
}

/// Per-task memory: K stage prompts, the staged demonstrations, and the
/// reference segmentation.
#[derive(Debug, Clone)]
pub struct MemoryLibrary {
    pub task_id: u32,
    pub prompts: Vec<SoftPrompt>,
    pub demos: Vec<StagedDemonstration>,
    pub segmentation: StageSegmentation,
    pub config: LibraryConfig,
}

impl MemoryLibrary {
    pub fn num_stages(&self) -> usize {
        self.segmentation.num_stages()
    }

    pub fn num_demos(&self) -> usize {
        self.demos.len()
    }

    pub fn prompt(&self, stage: usize) -> &SoftPrompt {
        &self.prompts[stage - 1]
    }

    /// Replace every stage prompt with zeros (graceful-degradation baseline).
    pub fn zeroed(&self) -> Self {
        let mut out = self.clone();
        for p in &mut out.prompts {
            let (m, d) = p.v.shape();
            p.v = PromptMatrix::zeros(m, d);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_stages();
        if self.demos.is_empty() {
            return Err(Error::Contract("library has no demonstrations".into()));
        }
        if self.prompts.len() != k {
            return Err(Error::Contract(format!(
                "library has {} prompts for {k} stages",
                self.prompts.len()
            )));
        }
        for (i, p) in self.prompts.iter().enumerate() {
            if p.stage != i + 1 || p.v.shape() != (self.config.m, self.config.d) {
                return Err(Error::Contract(format!("prompt {i} malformed")));
            }
        }
        for demo in &self.demos {
            if demo.num_stages() != k {
                return Err(Error::Contract(format!(
                    "demo stage count {} != {k}",
                    demo.num_stages()
                )));
            }
        }
        Ok(())
    }
}

/// Training pairs restricted to timesteps with stage label `k`.
fn stage_samples(
    demos: &[StagedDemonstration],
    k: usize,
    cfg: &crate::policy::PolicyConfig,
) -> Result<Vec<Sample>> {
    let mut samples = Vec::new();
    for staged in demos {
        let all = crate::policy::Dataset::demo_samples(&staged.demo, cfg)?;
        for t in staged.stage_indices(k) {
            samples.push(all[t].clone());
        }
    }
    Ok(samples)
}

/// Optimize a zero-initialized prompt offset on the given samples with the
/// frozen backbone. Returns the prompt and its loss curve.
pub fn tune_prompt(
    frozen: &PolicyParams,
    samples: &[Sample],
    tcfg: &TrainConfig,
    seed: u64,
) -> Result<(PromptMatrix, Vec<f64>)> {
    if samples.is_empty() {
        return Err(Error::Contract("no samples to tune on".into()));
    }
    let cfg = frozen.cfg;
    let checksum_before = frozen.checksum();
    let mut v = PromptMatrix::zeros(cfg.m, cfg.d);
    let mut rng = rng::stream(seed, &[rng::TUNE]);
    let mut adam = Adam::new(tcfg.lr, cfg.prompt_dim());
    let mut curve = Vec::with_capacity(tcfg.steps);

    const CHUNK: usize = 8;
    for step in 0..tcfg.steps {
        let items = draw_batch(&mut rng, samples.len(), tcfg.batch, cfg.chunk_dim());
        let ranges: Vec<(usize, usize)> = (0..items.len())
            .step_by(CHUNK)
            .map(|s| (s, (s + CHUNK).min(items.len())))
            .collect();
        let partials = crate::par::map_slice(&ranges, |&(lo, hi)| {
            let mut grad = vec![0.0; cfg.prompt_dim()];
            let mut loss = 0.0;
            for item in &items[lo..hi] {
                loss += sample_loss_grad(
                    frozen,
                    &samples[item.sample_idx],
                    item.tau,
                    &item.eps,
                    Some(&v),
                    None,
                    Some(&mut grad),
                );
            }
            (loss, grad)
        });
        let scale = 1.0 / items.len() as f64;
        let mut grad = vec![0.0; cfg.prompt_dim()];
        let mut loss = 0.0;
        for (l, g) in partials {
            loss += l;
            for (acc, p) in grad.iter_mut().zip(&g) {
                *acc += p * scale;
            }
        }
        loss *= scale;
        if !loss.is_finite() {
            return Err(Error::TrainingFailure(format!(
                "prompt tuning loss non-finite at step {step}"
            )));
        }
        adam.step(v.data_mut(), &grad);
        curve.push(loss);
    }

    // Frozen-backbone contract: tuning must not have touched theta.
    assert_eq!(
        frozen.checksum(),
        checksum_before,
        "backbone weights changed during prompt tuning"
    );
    Ok((v, curve))
}

/// Tune the stage-k prompt on stage-restricted timesteps.
pub fn tune_stage_prompt(
    frozen: &PolicyParams,
    demos: &[StagedDemonstration],
    k: usize,
    tcfg: &TrainConfig,
    seed: u64,
) -> Result<(SoftPrompt, Vec<f64>)> {
    let samples = stage_samples(demos, k, &frozen.cfg)?;
    if samples.is_empty() {
        return Err(Error::EmptyStage { stage: k });
    }
    let task_id = demos.first().map_or(0, |d| d.demo.task_id);
    let (v, curve) = tune_prompt(frozen, &samples, tcfg, seed)?;
    Ok((
        SoftPrompt {
            v,
            stage: k,
            task_id,
        },
        curve,
    ))
}

/// Tune all K stage prompts (independent problems, run in parallel) and
/// bundle them with the demonstrations and segmentation.
pub fn build_library(
    frozen: &PolicyParams,
    staged: &[StagedDemonstration],
    segmentation: &StageSegmentation,
    epsilon_rdp: f64,
    window: usize,
    tcfg: &TrainConfig,
    seed: u64,
) -> Result<MemoryLibrary> {
    if staged.is_empty() {
        return Err(Error::Contract("build_library needs demonstrations".into()));
    }
    let task_id = staged[0].demo.task_id;
    let k = segmentation.num_stages();
    let results = crate::par::map_range(k, |i| {
        let stage = i + 1;
        tune_stage_prompt(
            frozen,
            staged,
            stage,
            tcfg,
            rng::mix(seed, &[rng::TUNE, task_id as u64, stage as u64]),
        )
    });
    let mut prompts = Vec::with_capacity(k);
    for r in results {
        let (p, _) = r?;
        prompts.push(p);
    }
    let lib = MemoryLibrary {
        task_id,
        prompts,
        demos: staged.to_vec(),
        segmentation: segmentation.clone(),
        config: LibraryConfig {
            m: frozen.cfg.m,
            d: frozen.cfg.d,
            horizon: frozen.cfg.horizon,
            window,
            epsilon_rdp,
        },
    };
    lib.validate()?;
    Ok(lib)
}

// ---------------------------------------------------------------------------
// Persistence: one directory per task.
//   manifest.txt   version, ids, counts, config echo, segmentation
//   prompt_<k>.txt stage prompts
//   demo_<i>.txt   staged demonstrations
// ---------------------------------------------------------------------------

fn prompt_to_text(scope: &str, task_id: u32, stage: usize, v: &PromptMatrix) -> String {
    let (m, d) = v.shape();
    let mut w = TextWriter::new("prompt", 1);
    w.kv("scope", scope);
    w.kv("task_id", task_id);
    w.kv("stage", stage);
    w.floats("v", m, d, v.data());
    w.finish()
}

fn prompt_from_text(label: &str, content: &str) -> Result<(String, u32, usize, PromptMatrix)> {
    let mut r = TextReader::from_string(label, content);
    r.expect_header("prompt", 1)?;
    let scope: String = r.kv_parse("scope")?;
    let task_id: u32 = r.kv_parse("task_id")?;
    let stage: usize = r.kv_parse("stage")?;
    let (m, d, data) = r.floats("v")?;
    let v = PromptMatrix::new(m, d, data).map_err(|e| Error::InvariantViolation {
        path: label.to_string(),
        reason: e.to_string(),
    })?;
    Ok((scope, task_id, stage, v))
}

/// Write a whole-trajectory (universal or per-task) prompt file.
pub fn save_scoped_prompt(path: &Path, scope: &str, task_id: u32, v: &PromptMatrix) -> Result<()> {
    std::fs::write(path, prompt_to_text(scope, task_id, 0, v))?;
    Ok(())
}

pub fn load_scoped_prompt(path: &Path, expect_scope: &str) -> Result<(u32, PromptMatrix)> {
    let content = std::fs::read_to_string(path)?;
    let (scope, task_id, _, v) = prompt_from_text(&path.display().to_string(), &content)?;
    if scope != expect_scope {
        return Err(Error::InvariantViolation {
            path: path.display().to_string(),
            reason: format!("expected scope {expect_scope}, found {scope}"),
        });
    }
    Ok((task_id, v))
}

pub fn save_library(lib: &MemoryLibrary, dir: &Path) -> Result<()> {
    lib.validate()?;
    std::fs::create_dir_all(dir)?;
    let mut w = TextWriter::new("library", 1);
    w.kv("task_id", lib.task_id);
    w.kv("num_stages", lib.num_stages());
    w.kv("num_demos", lib.num_demos());
    w.kv("m", lib.config.m);
    w.kv("d", lib.config.d);
    w.kv("horizon", lib.config.horizon);
    w.kv("window", lib.config.window);
    w.kv_f64("epsilon_rdp", lib.config.epsilon_rdp);
    w.kv("ref_len", lib.segmentation.ref_len());
    let bounds: Vec<i64> = lib
        .segmentation
        .boundaries()
        .iter()
        .map(|&b| b as i64)
        .collect();
    w.ints("boundaries", &bounds);
    w.write_to(&dir.join("manifest.txt"))?;

    for p in &lib.prompts {
        std::fs::write(
            dir.join(format!("prompt_{:03}.txt", p.stage)),
            prompt_to_text("stage", p.task_id, p.stage, &p.v),
        )?;
    }
    for (i, staged) in lib.demos.iter().enumerate() {
        staged
            .demo
            .save(&dir.join(format!("demo_{i:04}.txt")), Some(&staged.stage_labels))?;
    }
    Ok(())
}

pub fn load_library(dir: &Path) -> Result<MemoryLibrary> {
    let manifest_path = dir.join("manifest.txt");
    let mut r = TextReader::open(&manifest_path)?;
    r.expect_header("library", 1)?;
    let task_id: u32 = r.kv_parse("task_id")?;
    let num_stages: usize = r.kv_parse("num_stages")?;
    let num_demos: usize = r.kv_parse("num_demos")?;
    let m: usize = r.kv_parse("m")?;
    let d: usize = r.kv_parse("d")?;
    let horizon: usize = r.kv_parse("horizon")?;
    let window: usize = r.kv_parse("window")?;
    let epsilon_rdp: f64 = r.kv_parse("epsilon_rdp")?;
    let ref_len: usize = r.kv_parse("ref_len")?;
    let bounds: Vec<usize> = r.ints("boundaries")?.into_iter().map(|b| b as usize).collect();
    let label = manifest_path.display().to_string();
    let segmentation =
        StageSegmentation::new(bounds, num_stages, ref_len).map_err(|e| Error::InvariantViolation {
            path: label.clone(),
            reason: e.to_string(),
        })?;

    let mut prompts = Vec::with_capacity(num_stages);
    for stage in 1..=num_stages {
        let path = dir.join(format!("prompt_{stage:03}.txt"));
        let content = std::fs::read_to_string(&path)?;
        let (scope, tid, s, v) = prompt_from_text(&path.display().to_string(), &content)?;
        if scope != "stage" || s != stage || tid != task_id || v.shape() != (m, d) {
            return Err(Error::InvariantViolation {
                path: path.display().to_string(),
                reason: format!("prompt metadata mismatch (scope={scope}, stage={s})"),
            });
        }
        prompts.push(SoftPrompt {
            v,
            stage,
            task_id,
        });
    }

    let mut demos = Vec::with_capacity(num_demos);
    for i in 0..num_demos {
        let path = dir.join(format!("demo_{i:04}.txt"));
        let (demo, labels) = Demonstration::load(&path)?;
        let labels = labels.ok_or_else(|| Error::InvariantViolation {
            path: path.display().to_string(),
            reason: "library demo lacks stage labels".into(),
        })?;
        demos.push(StagedDemonstration {
            demo,
            stage_labels: labels,
        });
    }

    let lib = MemoryLibrary {
        task_id,
        prompts,
        demos,
        segmentation,
        config: LibraryConfig {
            m,
            d,
            horizon,
            window,
            epsilon_rdp,
        },
    };
    lib.validate().map_err(|e| Error::InvariantViolation {
        path: label,
        reason: e.to_string(),
    })?;
    Ok(lib)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{eval_loss, train_base, Dataset, PolicyConfig};
    use crate::segment::segment_demos;
    use crate::simenv::{bundled_task, gen_demos, Env};

    fn tiny_cfg() -> PolicyConfig {
        PolicyConfig {
            m: 2,
            d: 4,
            horizon: 2,
            hidden: 12,
            max_objects: 3,
            num_tasks: 3,
        }
    }

    fn tiny_setup() -> (PolicyParams, Vec<StagedDemonstration>, StageSegmentation, f64) {
        let task = bundled_task(0).unwrap();
        let demos = gen_demos(&task, 4, 19, 0.005).unwrap();
        let seg = segment_demos(&demos, 0.02).unwrap();
        let tcfg = TrainConfig {
            steps: 60,
            batch: 16,
            lr: 1e-3,
        };
        let (params, _) = train_base(&demos, tiny_cfg(), &tcfg, 1).unwrap();
        (params, seg.staged, seg.segmentation, seg.epsilon)
    }

    #[test]
    fn compose_identities() {
        let base = {
            let mut p = PromptMatrix::zeros(2, 3);
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                *x = i as f64 * 0.25 - 0.5;
            }
            p
        };
        let zero = SoftPrompt {
            v: PromptMatrix::zeros(2, 3),
            stage: 1,
            task_id: 0,
        };
        assert_eq!(compose_prompt(&base, &zero).unwrap(), base);

        let v = SoftPrompt {
            v: base.clone(),
            stage: 1,
            task_id: 0,
        };
        let zero_base = PromptMatrix::zeros(2, 3);
        assert_eq!(compose_prompt(&zero_base, &v).unwrap(), base);

        // compose(compose(b, v), -v) == b exactly
        let composed = compose_prompt(&base, &v).unwrap();
        let neg = SoftPrompt {
            v: PromptMatrix::new(2, 3, v.v.data().iter().map(|x| -x).collect()).unwrap(),
            stage: 1,
            task_id: 0,
        };
        assert_eq!(compose_prompt(&composed, &neg).unwrap(), base);
    }

    #[test]
    fn compose_rejects_shape_mismatch() {
        let base = PromptMatrix::zeros(2, 3);
        let soft = SoftPrompt {
            v: PromptMatrix::zeros(3, 2),
            stage: 1,
            task_id: 0,
        };
        assert!(matches!(
            compose_prompt(&base, &soft),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn zero_tuning_steps_keep_prompt_zero_and_prediction_equal() {
        let (params, staged, _, _) = tiny_setup();
        let tcfg = TrainConfig {
            steps: 0,
            ..Default::default()
        };
        let (sp, curve) = tune_stage_prompt(&params, &staged, 1, &tcfg, 3).unwrap();
        assert!(curve.is_empty());
        assert!(sp.v.data().iter().all(|&x| x == 0.0));

        let task = bundled_task(0).unwrap();
        let obs = Env::reset(&task, 5).unwrap().observation().clone();
        let base = params.encode_base_prompt(&obs).unwrap();
        let composed = compose_prompt(&base, &sp).unwrap();
        let a = crate::policy::predict_chunk(&params, &base, 77).unwrap();
        let b = crate::policy::predict_chunk(&params, &composed, 77).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tuning_improves_stage_loss_and_freezes_backbone() {
        let (params, staged, _, _) = tiny_setup();
        let before = params.checksum();
        let tcfg = TrainConfig {
            steps: 80,
            batch: 16,
            lr: 1e-2,
        };
        let (sp, _) = tune_stage_prompt(&params, &staged, 1, &tcfg, 3).unwrap();
        assert_eq!(params.checksum(), before);

        // Fixed evaluation set over stage-1 samples.
        let samples = super::stage_samples(&staged, 1, &params.cfg).unwrap();
        let ds = Dataset { samples };
        let mut rng = crate::rng::stream(4, &[crate::rng::TUNE]);
        let items = crate::policy::draw_batch(&mut rng, ds.len(), 256, params.cfg.chunk_dim());
        let with_zero = eval_loss(&params, &ds, &items, None);
        let with_tuned = eval_loss(&params, &ds, &items, Some(&sp.v));
        assert!(
            with_tuned <= with_zero,
            "tuned {with_tuned} > untuned {with_zero}"
        );
    }

    #[test]
    fn empty_stage_is_an_error() {
        let (params, staged, seg, _) = tiny_setup();
        let missing = seg.num_stages() + 5;
        let tcfg = TrainConfig::default();
        assert!(matches!(
            tune_stage_prompt(&params, &staged, missing, &tcfg, 0),
            Err(Error::EmptyStage { .. })
        ));
    }

    #[test]
    fn library_cardinality_and_determinism() {
        let (params, staged, seg, eps) = tiny_setup();
        let tcfg = TrainConfig {
            steps: 10,
            batch: 8,
            lr: 1e-3,
        };
        let a = build_library(&params, &staged, &seg, eps, 10, &tcfg, 7).unwrap();
        assert_eq!(a.prompts.len(), seg.num_stages());
        assert_eq!(a.num_demos(), staged.len());
        assert_eq!(a.config.window, 10);
        let b = build_library(&params, &staged, &seg, eps, 10, &tcfg, 7).unwrap();
        for (pa, pb) in a.prompts.iter().zip(&b.prompts) {
            assert_eq!(pa, pb);
        }
    }

    #[test]
    fn library_roundtrip_bit_exact_and_idempotent() {
        let (params, staged, seg, eps) = tiny_setup();
        let tcfg = TrainConfig {
            steps: 5,
            batch: 8,
            lr: 1e-3,
        };
        let lib = build_library(&params, &staged, &seg, eps, 10, &tcfg, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_library(&lib, dir.path()).unwrap();
        let back = load_library(dir.path()).unwrap();
        assert_eq!(back.task_id, lib.task_id);
        assert_eq!(back.segmentation, lib.segmentation);
        assert_eq!(back.config, lib.config);
        for (a, b) in lib.prompts.iter().zip(&back.prompts) {
            assert_eq!(a, b);
        }
        for (a, b) in lib.demos.iter().zip(&back.demos) {
            assert_eq!(a, b);
        }
        // save -> load -> save produces byte-identical files
        let dir2 = tempfile::tempdir().unwrap();
        save_library(&back, dir2.path()).unwrap();
        for entry in std::fs::read_dir(dir.path()).unwrap() {
            let name = entry.unwrap().file_name();
            let f1 = std::fs::read(dir.path().join(&name)).unwrap();
            let f2 = std::fs::read(dir2.path().join(&name)).unwrap();
            assert_eq!(f1, f2, "file {name:?} differs");
        }
    }

    #[test]
    fn corrupted_stage_count_fails_load() {
        let (params, staged, seg, eps) = tiny_setup();
        let tcfg = TrainConfig {
            steps: 2,
            batch: 8,
            lr: 1e-3,
        };
        let lib = build_library(&params, &staged, &seg, eps, 10, &tcfg, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_library(&lib, dir.path()).unwrap();
        let manifest = dir.path().join("manifest.txt");
        let content = std::fs::read_to_string(&manifest).unwrap();
        let corrupted = content.replace(
            &format!("num_stages {}", lib.num_stages()),
            &format!("num_stages {}", lib.num_stages() + 1),
        );
        std::fs::write(&manifest, corrupted).unwrap();
        match load_library(dir.path()) {
            Err(Error::InvariantViolation { .. }) | Err(Error::Io(_)) => {}
            other => panic!("expected invariant violation, got {other:?}"),
        }
    }

    #[test]
    fn unknown_version_fails_load() {
        let (params, staged, seg, eps) = tiny_setup();
        let tcfg = TrainConfig {
            steps: 2,
            batch: 8,
            lr: 1e-3,
        };
        let lib = build_library(&params, &staged, &seg, eps, 10, &tcfg, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_library(&lib, dir.path()).unwrap();
        let manifest = dir.path().join("manifest.txt");
        let content = std::fs::read_to_string(&manifest).unwrap();
        std::fs::write(&manifest, content.replace("library v1", "library v9")).unwrap();
        match load_library(dir.path()) {
            Err(Error::VersionMismatch { .. }) => {}
            other => panic!("expected version mismatch, got {other:?}"),
        }
    }

    #[test]
    fn truncated_file_fails_load() {
        let (params, staged, seg, eps) = tiny_setup();
        let tcfg = TrainConfig {
            steps: 2,
            batch: 8,
            lr: 1e-3,
        };
        let lib = build_library(&params, &staged, &seg, eps, 10, &tcfg, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_library(&lib, dir.path()).unwrap();
        let prompt = dir.path().join("prompt_001.txt");
        let content = std::fs::read_to_string(&prompt).unwrap();
        let half = &content[..content.len() / 2];
        std::fs::write(&prompt, half).unwrap();
        assert!(load_library(dir.path()).is_err());
    }
}
