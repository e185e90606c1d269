//! Online control loop: observe, retrieve, dual forward pass, ensemble, act.
//!
//! Every timestep the policy re-plans an H-step chunk and executes only its
//! first action. In the full mode two predictions are made from the same
//! noise draw — one from the base prompt, one from the retrieved stage
//! prompt — and blended with a weight that favors whichever prediction lies
//! closer to the retrieved demonstration's actions.

use std::time::Instant;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::memory::{compose_prompt, MemoryLibrary};
use crate::policy::{predict_chunk, PolicyParams, PromptMatrix};
use crate::retrieval::{retrieve, RetrievalIndex, RetrievalQuery, StageTracker};
use crate::rng;
use crate::simenv::{Action, ActionChunk, Env, Observation, RobotState, TaskSpec};
use crate::textio::{TextReader, TextWriter};

/// Softmax weights are kept strictly inside (0,1); at extreme distance gaps
/// the raw expression rounds to exactly 0 or 1 in f64.
const ALPHA_INTERIOR: f64 = 1e-12;

/// Dynamic ensembling weight for the memory prediction:
/// softmax over negative squared chunk distances to the retrieved actions,
/// computed with the max logit subtracted.
pub fn ensemble_alpha(a_mem: &[f64], a_base: &[f64], a_ref: &[f64]) -> Result<f64> {
    if a_mem.len() != a_ref.len() || a_base.len() != a_ref.len() {
        return Err(Error::Contract(format!(
            "ensemble dims differ: mem {}, base {}, ref {}",
            a_mem.len(),
            a_base.len(),
            a_ref.len()
        )));
    }
    let d2 = |x: &[f64]| -> f64 {
        x.iter()
            .zip(a_ref)
            .map(|(a, r)| (a - r) * (a - r))
            .sum()
    };
    let l_mem = -d2(a_mem);
    let l_base = -d2(a_base);
    if !l_mem.is_finite() || !l_base.is_finite() {
        return Err(Error::Contract("non-finite ensemble input".into()));
    }
    let m = l_mem.max(l_base);
    let e_mem = (l_mem - m).exp();
    let e_base = (l_base - m).exp();
    let alpha = e_mem / (e_mem + e_base);
    Ok(alpha.clamp(ALPHA_INTERIOR, 1.0 - ALPHA_INTERIOR))
}

/// Convex combination alpha*mem + (1-alpha)*base, evaluated as
/// base + alpha*(mem - base) so equal predictions pass through bit-exactly.
pub fn ensemble_action(a_mem: &ActionChunk, a_base: &ActionChunk, alpha: f64) -> ActionChunk {
    assert!(
        alpha > 0.0 && alpha < 1.0,
        "ensemble weight {alpha} outside (0,1)"
    );
    let m = a_mem.to_flat();
    let b = a_base.to_flat();
    assert_eq!(m.len(), b.len());
    let out: Vec<f64> = b
        .iter()
        .zip(&m)
        .map(|(&bb, &mm)| bb + alpha * (mm - bb))
        .collect();
    ActionChunk::from_flat(&out)
}

/// Execution mode ladder. The prompt-bearing modes borrow what they need, so
/// an invalid combination (stage mode without a library) cannot be expressed.
pub enum RolloutMode<'a> {
    /// Base prompt only; no memory machinery at all.
    Base,
    /// One shared whole-trajectory prompt for all tasks.
    Universal(&'a PromptMatrix),
    /// One whole-trajectory prompt for this task.
    Task(&'a PromptMatrix),
    /// Stage prompts with retrieval; the memory prediction is executed as-is.
    Stage(&'a MemoryLibrary),
    /// Stage prompts with retrieval plus dynamic prompt ensembling.
    Full(&'a MemoryLibrary),
}

impl RolloutMode<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            RolloutMode::Base => "base",
            RolloutMode::Universal(_) => "universal",
            RolloutMode::Task(_) => "task",
            RolloutMode::Stage(_) => "stage",
            RolloutMode::Full(_) => "full",
        }
    }
}

pub const MODE_NAMES: [&str; 5] = ["base", "universal", "task", "stage", "full"];

#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub t: usize,
    pub stage: Option<usize>,
    pub retrieval_cost: Option<f64>,
    pub alpha: Option<f64>,
    pub action: Action,
    pub success_flags: Vec<bool>,
}

/// Seed-deterministic record of one episode; wall-clock measurements are
/// deliberately kept out so traces are bit-reproducible.
#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionTrace {
    pub task_id: u32,
    pub mode: String,
    pub seed: u64,
    pub obs_noise_std: f64,
    pub success: bool,
    pub partial_success: bool,
    pub aborted: bool,
    pub steps: Vec<TraceStep>,
}

impl ExecutionTrace {
    pub fn actions(&self) -> Vec<Action> {
        self.steps.iter().map(|s| s.action).collect()
    }
}

/// Episode result: the persistent trace plus per-step retrieval latencies
/// (empty for modes that never retrieve).
pub struct RolloutRecord {
    pub trace: ExecutionTrace,
    pub retrieval_secs: Vec<f64>,
}

fn perturb_observation(obs: &Observation, std: f64, rng: &mut ChaCha8Rng) -> Observation {
    if std == 0.0 {
        return obs.clone();
    }
    let mut out = obs.clone();
    out.robot.position[0] += std * rng::normal(rng);
    out.robot.position[1] += std * rng::normal(rng);
    out.robot.gripper += std * rng::normal(rng);
    for p in &mut out.objects {
        p[0] += std * rng::normal(rng);
        p[1] += std * rng::normal(rng);
    }
    for p in &mut out.goals {
        p[0] += std * rng::normal(rng);
        p[1] += std * rng::normal(rng);
    }
    out
}

/// Run one episode. All stochasticity derives from `episode_seed`, which is
/// deliberately mode-independent: rollouts of different modes with the same
/// seed share the object placement, the per-step flow noise and the per-step
/// observation noise, so mode comparisons are paired and zeroed prompts make
/// `full` reproduce `base` bit for bit.
pub fn run_episode(
    params: &PolicyParams,
    mode: &RolloutMode,
    task: &TaskSpec,
    episode_seed: u64,
    obs_noise_std: f64,
) -> Result<RolloutRecord> {
    let mut env = Env::reset(task, episode_seed)?;
    let index = match mode {
        RolloutMode::Stage(lib) | RolloutMode::Full(lib) => Some(RetrievalIndex::new(lib)),
        _ => None,
    };
    let mut tracker = StageTracker::new();
    let mut history: Vec<RobotState> = Vec::with_capacity(task.max_episode_steps);
    let mut steps: Vec<TraceStep> = Vec::new();
    let mut retrieval_secs = Vec::new();
    let mut aborted = false;
    let mut final_flags: Vec<bool> = vec![false; task.num_subtasks()];

    for t in 0..task.max_episode_steps {
        let mut obs_rng = rng::stream(episode_seed, &[rng::OBS_NOISE, t as u64]);
        let seen = perturb_observation(env.observation(), obs_noise_std, &mut obs_rng);
        history.push(seen.robot);
        let noise_seed = rng::mix(episode_seed, &[rng::NOISE, t as u64]);
        let base_prompt = params.encode_base_prompt(&seen)?;

        let mut stage = None;
        let mut retrieval_cost = None;
        let mut alpha = None;

        let chunk = match mode {
            RolloutMode::Base => predict_chunk(params, &base_prompt, noise_seed)?,
            RolloutMode::Universal(v) | RolloutMode::Task(v) => {
                let composed = add_prompts(&base_prompt, v)?;
                predict_chunk(params, &composed, noise_seed)?
            }
            RolloutMode::Stage(lib) | RolloutMode::Full(lib) => {
                let idx = index.as_ref().unwrap();
                let query =
                    RetrievalQuery::from_history(&history, lib.config.window, tracker.current())?;
                let t0 = Instant::now();
                let result = retrieve(idx, &query)?;
                retrieval_secs.push(t0.elapsed().as_secs_f64());
                tracker.observe(&result);
                stage = Some(result.stage);
                retrieval_cost = Some(result.cost);

                let composed = compose_prompt(&base_prompt, lib.prompt(result.stage))?;
                let a_mem = predict_chunk(params, &composed, noise_seed)?;
                match mode {
                    RolloutMode::Stage(_) => a_mem,
                    _ => {
                        let a_base = predict_chunk(params, &base_prompt, noise_seed)?;
                        let a = ensemble_alpha(
                            &a_mem.to_flat(),
                            &a_base.to_flat(),
                            &result.demo_actions.to_flat(),
                        )?;
                        alpha = Some(a);
                        ensemble_action(&a_mem, &a_base, a)
                    }
                }
            }
        };

        let action = chunk.first();
        if !action.is_finite() {
            aborted = true;
            steps.push(TraceStep {
                t,
                stage,
                retrieval_cost,
                alpha,
                action: Action::zero(),
                success_flags: final_flags.clone(),
            });
            break;
        }
        let outcome = env.step(&action);
        final_flags = outcome.success_flags.clone();
        steps.push(TraceStep {
            t,
            stage,
            retrieval_cost,
            alpha,
            action,
            success_flags: outcome.success_flags,
        });
        if outcome.done {
            break;
        }
    }

    let success = !aborted && final_flags.iter().all(|&f| f);
    let partial_success = !aborted && final_flags.first().copied().unwrap_or(false);
    Ok(RolloutRecord {
        trace: ExecutionTrace {
            task_id: task.task_id,
            mode: mode.name().to_string(),
            seed: episode_seed,
            obs_noise_std,
            success,
            partial_success,
            aborted,
            steps,
        },
        retrieval_secs,
    })
}

fn add_prompts(base: &PromptMatrix, offset: &PromptMatrix) -> Result<PromptMatrix> {
    if base.shape() != offset.shape() {
        return Err(Error::Contract(format!(
            "prompt shapes differ: {:?} vs {:?}",
            base.shape(),
            offset.shape()
        )));
    }
    let (m, d) = base.shape();
    PromptMatrix::new(
        m,
        d,
        base.data()
            .iter()
            .zip(offset.data())
            .map(|(b, o)| b + o)
            .collect(),
    )
}

// ---------------------------------------------------------------------------
// Trace files: one per episode, timestep rows.
// ---------------------------------------------------------------------------

fn flags_to_str(flags: &[bool]) -> String {
    flags.iter().map(|&f| if f { '1' } else { '0' }).collect()
}

pub fn trace_to_text(trace: &ExecutionTrace) -> String {
    let mut w = TextWriter::new("trace", 1);
    w.kv("task_id", trace.task_id);
    w.kv("mode", &trace.mode);
    w.kv("seed", trace.seed);
    w.kv_f64("obs_noise_std", trace.obs_noise_std);
    w.kv("success", u8::from(trace.success));
    w.kv("partial_success", u8::from(trace.partial_success));
    w.kv("aborted", u8::from(trace.aborted));
    w.kv("length", trace.steps.len());
    w.kv("columns", "t stage cost alpha dx dy gripper flags");
    let mut body = String::new();
    for s in &trace.steps {
        let stage = s.stage.map_or("-".to_string(), |k| k.to_string());
        let cost = s
            .retrieval_cost
            .map_or("-".to_string(), crate::textio::fmt_f64);
        let alpha = s.alpha.map_or("-".to_string(), crate::textio::fmt_f64);
        body.push_str(&format!(
            "{} {} {} {} {} {} {} {}\n",
            s.t,
            stage,
            cost,
            alpha,
            crate::textio::fmt_f64(s.action.delta[0]),
            crate::textio::fmt_f64(s.action.delta[1]),
            crate::textio::fmt_f64(s.action.gripper_cmd),
            flags_to_str(&s.success_flags),
        ));
    }
    w.finish() + &body
}

pub fn trace_from_text(label: &str, content: &str) -> Result<ExecutionTrace> {
    let mut r = TextReader::from_string(label, content);
    r.expect_header("trace", 1)?;
    let task_id: u32 = r.kv_parse("task_id")?;
    let mode: String = r.kv_parse("mode")?;
    let seed: u64 = r.kv_parse("seed")?;
    let obs_noise_std: f64 = r.kv_parse("obs_noise_std")?;
    let success = r.kv_parse::<u8>("success")? != 0;
    let partial_success = r.kv_parse::<u8>("partial_success")? != 0;
    let aborted = r.kv_parse::<u8>("aborted")? != 0;
    let length: usize = r.kv_parse("length")?;
    let _ = r.kv("columns")?;

    let err = |reason: &str| Error::Parse {
        path: label.to_string(),
        reason: reason.to_string(),
    };
    let mut steps = Vec::with_capacity(length);
    for line in content.lines().skip(10).take(length) {
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 8 {
            return Err(err("trace row needs 8 columns"));
        }
        let parse_opt = |tok: &str| -> Result<Option<f64>> {
            if tok == "-" {
                Ok(None)
            } else {
                tok.parse().map(Some).map_err(|_| err("bad float in trace row"))
            }
        };
        steps.push(TraceStep {
            t: toks[0].parse().map_err(|_| err("bad t"))?,
            stage: if toks[1] == "-" {
                None
            } else {
                Some(toks[1].parse().map_err(|_| err("bad stage"))?)
            },
            retrieval_cost: parse_opt(toks[2])?,
            alpha: parse_opt(toks[3])?,
            action: Action {
                delta: [
                    toks[4].parse().map_err(|_| err("bad dx"))?,
                    toks[5].parse().map_err(|_| err("bad dy"))?,
                ],
                gripper_cmd: toks[6].parse().map_err(|_| err("bad gripper"))?,
            },
            success_flags: toks[7].chars().map(|c| c == '1').collect(),
        });
    }
    if steps.len() != length {
        return Err(err("trace truncated"));
    }
    Ok(ExecutionTrace {
        task_id,
        mode,
        seed,
        obs_noise_std,
        success,
        partial_success,
        aborted,
        steps,
    })
}
