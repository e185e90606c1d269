//! Planar multi-stage pick-and-place environment.
//!
//! A point robot with a binary-ish gripper moves in the unit square, picking
//! objects and carrying them to goals in a fixed sub-task order. There is no
//! physics: grasping is a threshold event on the gripper command, and a held
//! object tracks the robot exactly. The environment is a pure function of
//! (task, seed, action sequence).

mod expert;

pub use expert::{gen_demos, scripted_expert};

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::textio::{TextReader, TextWriter};

pub type Vec2 = [f64; 2];

/// Largest per-component position increment an action may request. Sized so
/// a pick-or-place leg spans a couple dozen control steps and a single task
/// stage is comparable to the default retrieval window.
pub const MAX_STEP: f64 = 0.03;
/// Robot-to-object distance within which an upward gripper crossing grasps.
pub const GRASP_RADIUS: f64 = 0.04;
/// Fixed robot start pose.
pub const HOME: Vec2 = [0.5, 0.1];
/// Minimum pairwise separation between placed entities (objects and goals).
const MIN_SEPARATION: f64 = 0.1;
/// Entities are placed inside [MARGIN, 1-MARGIN]^2.
const PLACEMENT_MARGIN: f64 = 0.1;
/// Entities keep this distance from the robot home position.
const HOME_CLEARANCE: f64 = 0.3;
/// Each object is at least this far from its own goal, so every
/// pick-and-place leg spans several control steps (a stage is then at
/// least as long as the default retrieval window).
const PAIR_MIN_DIST: f64 = 0.45;
/// Total rejection-sampling budget for one reset.
const PLACEMENT_ATTEMPTS: usize = 1000;

pub fn dist2(a: Vec2, b: Vec2) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    (dx * dx + dy * dy).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobotState {
    pub position: Vec2,
    /// 0 = open, 1 = closed.
    pub gripper: f64,
}

impl RobotState {
    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|c| c.is_finite()) && self.gripper.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub robot: RobotState,
    pub objects: Vec<Vec2>,
    pub goals: Vec<Vec2>,
    pub held_object: Option<usize>,
    pub task_id: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Action {
    pub delta: Vec2,
    pub gripper_cmd: f64,
}

impl Action {
    pub const DIM: usize = 3;

    pub fn zero() -> Self {
        Self {
            delta: [0.0, 0.0],
            gripper_cmd: 0.0,
        }
    }

    /// Clamp to the action invariants: |delta|_inf <= MAX_STEP, gripper in [0,1].
    pub fn clipped(&self) -> Self {
        Self {
            delta: [
                self.delta[0].clamp(-MAX_STEP, MAX_STEP),
                self.delta[1].clamp(-MAX_STEP, MAX_STEP),
            ],
            gripper_cmd: self.gripper_cmd.clamp(0.0, 1.0),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.delta.iter().all(|c| c.is_finite()) && self.gripper_cmd.is_finite()
    }
}

/// H future actions, the policy's prediction unit.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionChunk {
    actions: Vec<Action>,
}

impl ActionChunk {
    pub fn new(actions: Vec<Action>) -> Self {
        assert!(!actions.is_empty(), "empty action chunk");
        Self { actions }
    }

    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    pub fn actions(&self) -> &[Action] {
        &self.actions
    }

    pub fn first(&self) -> Action {
        self.actions[0]
    }

    /// Flatten to [dx, dy, gripper] * H.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.actions.len() * Action::DIM);
        for a in &self.actions {
            out.push(a.delta[0]);
            out.push(a.delta[1]);
            out.push(a.gripper_cmd);
        }
        out
    }

    pub fn from_flat(flat: &[f64]) -> Self {
        assert!(
            !flat.is_empty() && flat.len() % Action::DIM == 0,
            "flat chunk length {} not a multiple of {}",
            flat.len(),
            Action::DIM
        );
        let actions = flat
            .chunks_exact(Action::DIM)
            .map(|c| Action {
                delta: [c[0], c[1]],
                gripper_cmd: c[2],
            })
            .collect();
        Self { actions }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub task_id: u32,
    pub num_objects: usize,
    /// Pick/place order: (object index, goal index) per sub-task.
    pub order: Vec<(usize, usize)>,
    pub tolerance: f64,
    pub max_episode_steps: usize,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.order.is_empty() || self.num_objects == 0 {
            return Err(Error::DegenerateTask(format!(
                "task {} has no sub-tasks or objects",
                self.task_id
            )));
        }
        if self.tolerance <= 0.0 {
            return Err(Error::DegenerateTask(format!(
                "task {} has non-positive tolerance",
                self.task_id
            )));
        }
        for &(oi, gi) in &self.order {
            if oi >= self.num_objects || gi >= self.num_objects {
                return Err(Error::DegenerateTask(format!(
                    "task {}: sub-task ({oi},{gi}) out of range",
                    self.task_id
                )));
            }
        }
        Ok(())
    }

    pub fn num_subtasks(&self) -> usize {
        self.order.len()
    }
}

/// The three bundled tasks: 1, 2 and 3 sequential pick-place sub-tasks.
pub fn bundled_tasks() -> Vec<TaskSpec> {
    vec![
        TaskSpec {
            task_id: 0,
            num_objects: 1,
            order: vec![(0, 0)],
            tolerance: 0.05,
            max_episode_steps: 200,
        },
        TaskSpec {
            task_id: 1,
            num_objects: 2,
            order: vec![(0, 0), (1, 1)],
            tolerance: 0.05,
            max_episode_steps: 320,
        },
        TaskSpec {
            task_id: 2,
            num_objects: 3,
            order: vec![(0, 0), (1, 1), (2, 2)],
            tolerance: 0.05,
            max_episode_steps: 450,
        },
    ]
}

pub fn bundled_task(task_id: u32) -> Result<TaskSpec> {
    bundled_tasks()
        .into_iter()
        .find(|t| t.task_id == task_id)
        .ok_or_else(|| Error::DegenerateTask(format!("no bundled task with id {task_id}")))
}

/// Observation after applying `action`, plus fresh per-sub-task success flags.
///
/// Order of effects: clip action, move robot (clamped to the unit square),
/// carry the held object, then resolve gripper threshold crossings.
pub fn transition(task: &TaskSpec, obs: &Observation, action: &Action) -> (Observation, Vec<bool>) {
    let a = action.clipped();
    let mut next = obs.clone();

    next.robot.position = [
        (obs.robot.position[0] + a.delta[0]).clamp(0.0, 1.0),
        (obs.robot.position[1] + a.delta[1]).clamp(0.0, 1.0),
    ];
    if let Some(held) = next.held_object {
        next.objects[held] = next.robot.position;
    }

    let prev = obs.robot.gripper;
    let crossed_up = prev < 0.5 && a.gripper_cmd >= 0.5;
    let crossed_down = prev >= 0.5 && a.gripper_cmd < 0.5;
    if crossed_up && next.held_object.is_none() {
        // Nearest free object within the grasp radius; ties go to the lower index.
        let mut best: Option<(usize, f64)> = None;
        for (i, &pos) in next.objects.iter().enumerate() {
            let d = dist2(next.robot.position, pos);
            if d <= GRASP_RADIUS && best.map_or(true, |(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        if let Some((i, _)) = best {
            next.held_object = Some(i);
            next.objects[i] = next.robot.position;
        }
    } else if crossed_down {
        next.held_object = None;
    }
    next.robot.gripper = a.gripper_cmd;

    let flags = success_flags(task, &next);
    (next, flags)
}

/// A sub-task succeeds when its object sits within tolerance of its goal and
/// is not held.
pub fn success_flags(task: &TaskSpec, obs: &Observation) -> Vec<bool> {
    task.order
        .iter()
        .map(|&(oi, gi)| {
            obs.held_object != Some(oi) && dist2(obs.objects[oi], obs.goals[gi]) <= task.tolerance
        })
        .collect()
}

/// One live episode: bookkeeping for the step budget on top of `transition`.
#[derive(Debug, Clone)]
pub struct Env {
    task: TaskSpec,
    obs: Observation,
    steps: usize,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub done: bool,
    pub success_flags: Vec<bool>,
}

impl Env {
    /// Place objects and goals uniformly at random (pairwise separation >=
    /// 0.1, inside the placement margin, clear of the home position, each
    /// object well away from its own goal), robot at home with an open
    /// gripper. Placement is a pure function of `seed`.
    pub fn reset(task: &TaskSpec, seed: u64) -> Result<Self> {
        task.validate()?;
        let mut rng = rng::stream(seed, &[rng::ENV]);
        // Objects first, then goals; goal slot g pairs with the object(s)
        // that `order` sends to it.
        let paired_objects: Vec<Vec<usize>> = (0..task.num_objects)
            .map(|g| {
                task.order
                    .iter()
                    .filter(|&&(_, gi)| gi == g)
                    .map(|&(oi, _)| oi)
                    .collect()
            })
            .collect();
        let mut points: Vec<Vec2> = Vec::with_capacity(task.num_objects * 2);
        let mut attempts = 0;
        while points.len() < task.num_objects * 2 {
            if attempts >= PLACEMENT_ATTEMPTS {
                return Err(Error::DegenerateTask(format!(
                    "task {}: placement failed after {PLACEMENT_ATTEMPTS} rejection samples",
                    task.task_id
                )));
            }
            attempts += 1;
            let lo = PLACEMENT_MARGIN;
            let hi = 1.0 - PLACEMENT_MARGIN;
            let p: Vec2 = [rng.gen_range(lo..hi), rng.gen_range(lo..hi)];
            if dist2(p, HOME) < HOME_CLEARANCE {
                continue;
            }
            if points.iter().any(|&q| dist2(p, q) < MIN_SEPARATION) {
                continue;
            }
            if points.len() >= task.num_objects {
                let goal_slot = points.len() - task.num_objects;
                if paired_objects[goal_slot]
                    .iter()
                    .any(|&oi| dist2(p, points[oi]) < PAIR_MIN_DIST)
                {
                    continue;
                }
            }
            points.push(p);
        }
        let objects = points[..task.num_objects].to_vec();
        let goals = points[task.num_objects..].to_vec();
        Ok(Self {
            task: task.clone(),
            obs: Observation {
                robot: RobotState {
                    position: HOME,
                    gripper: 0.0,
                },
                objects,
                goals,
                held_object: None,
                task_id: task.task_id,
            },
            steps: 0,
        })
    }

    pub fn observation(&self) -> &Observation {
        &self.obs
    }

    pub fn task(&self) -> &TaskSpec {
        &self.task
    }

    pub fn steps_taken(&self) -> usize {
        self.steps
    }

    pub fn budget_exhausted(&self) -> bool {
        self.steps >= self.task.max_episode_steps
    }

    pub fn step(&mut self, action: &Action) -> StepOutcome {
        let (next, flags) = transition(&self.task, &self.obs, action);
        self.obs = next;
        self.steps += 1;
        let done = flags.iter().all(|&f| f) || self.budget_exhausted();
        StepOutcome {
            done,
            success_flags: flags,
        }
    }
}

/// One expert or policy episode recorded as aligned observation/action/state
/// sequences; `states[t]` is the robot state of `observations[t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration {
    pub observations: Vec<Observation>,
    pub actions: Vec<Action>,
    pub states: Vec<RobotState>,
    pub task_id: u32,
}

impl Demonstration {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.observations.len() != self.actions.len()
            || self.actions.len() != self.states.len()
            || self.states.len() < 2
        {
            return Err(Error::InvalidTrajectory(format!(
                "demonstration lengths obs={} actions={} states={} (need equal, >= 2)",
                self.observations.len(),
                self.actions.len(),
                self.states.len()
            )));
        }
        for s in &self.states {
            if !s.is_finite() {
                return Err(Error::InvalidTrajectory("non-finite state".into()));
            }
        }
        Ok(())
    }

    /// Serialize, optionally with per-timestep stage labels appended.
    pub fn to_text(&self, stage_labels: Option<&[usize]>) -> String {
        let n = self.len();
        let k = self.observations.first().map_or(0, |o| o.objects.len());
        let mut w = TextWriter::new("demonstration", 1);
        w.kv("task_id", self.task_id);
        w.kv("num_objects", k);
        w.kv("length", n);

        let states: Vec<f64> = self
            .states
            .iter()
            .flat_map(|s| [s.position[0], s.position[1], s.gripper])
            .collect();
        w.floats("states", n, 3, &states);

        let actions: Vec<f64> = self
            .actions
            .iter()
            .flat_map(|a| [a.delta[0], a.delta[1], a.gripper_cmd])
            .collect();
        w.floats("actions", n, 3, &actions);

        let goals: Vec<f64> = self.observations[0]
            .goals
            .iter()
            .flat_map(|g| [g[0], g[1]])
            .collect();
        w.floats("goals", 1, 2 * k, &goals);

        let objects: Vec<f64> = self
            .observations
            .iter()
            .flat_map(|o| o.objects.iter().flat_map(|p| [p[0], p[1]]))
            .collect();
        w.floats("objects", n, 2 * k, &objects);

        let held: Vec<i64> = self
            .observations
            .iter()
            .map(|o| o.held_object.map_or(-1, |h| h as i64))
            .collect();
        w.ints("held", &held);

        if let Some(labels) = stage_labels {
            assert_eq!(labels.len(), n, "stage label length mismatch");
            let labels: Vec<i64> = labels.iter().map(|&l| l as i64).collect();
            w.ints("stage_labels", &labels);
        }
        w.finish()
    }

    pub fn from_text(label: &str, content: &str) -> Result<(Self, Option<Vec<usize>>)> {
        let mut r = TextReader::from_string(label, content);
        r.expect_header("demonstration", 1)?;
        let task_id: u32 = r.kv_parse("task_id")?;
        let k: usize = r.kv_parse("num_objects")?;
        let n: usize = r.kv_parse("length")?;

        let (_, _, states) = r.floats("states")?;
        let (_, _, actions) = r.floats("actions")?;
        let (_, gcols, goals) = r.floats("goals")?;
        let (_, _, objects) = r.floats("objects")?;
        let held = r.ints("held")?;
        if gcols != 2 * k || states.len() != n * 3 || actions.len() != n * 3 {
            return Err(Error::InvariantViolation {
                path: label.to_string(),
                reason: "array shapes inconsistent with header".into(),
            });
        }

        let goal_vecs: Vec<Vec2> = goals.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
        let mut demo = Demonstration {
            observations: Vec::with_capacity(n),
            actions: Vec::with_capacity(n),
            states: Vec::with_capacity(n),
            task_id,
        };
        for t in 0..n {
            let s = RobotState {
                position: [states[t * 3], states[t * 3 + 1]],
                gripper: states[t * 3 + 2],
            };
            demo.states.push(s);
            demo.actions.push(Action {
                delta: [actions[t * 3], actions[t * 3 + 1]],
                gripper_cmd: actions[t * 3 + 2],
            });
            let obj_row = &objects[t * 2 * k..(t + 1) * 2 * k];
            demo.observations.push(Observation {
                robot: s,
                objects: obj_row.chunks_exact(2).map(|c| [c[0], c[1]]).collect(),
                goals: goal_vecs.clone(),
                held_object: match held.get(t) {
                    Some(&h) if h >= 0 => Some(h as usize),
                    _ => None,
                },
                task_id,
            });
        }
        demo.validate().map_err(|e| Error::InvariantViolation {
            path: label.to_string(),
            reason: e.to_string(),
        })?;

        let labels = if r.at_end() {
            None
        } else {
            let raw = r.ints("stage_labels")?;
            if raw.len() != n {
                return Err(Error::InvariantViolation {
                    path: label.to_string(),
                    reason: "stage label count != length".into(),
                });
            }
            Some(raw.into_iter().map(|l| l as usize).collect())
        };
        Ok((demo, labels))
    }

    pub fn save(&self, path: &std::path::Path, stage_labels: Option<&[usize]>) -> Result<()> {
        std::fs::write(path, self.to_text(stage_labels))?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<(Self, Option<Vec<usize>>)> {
        let content = std::fs::read_to_string(path)?;
        Self::from_text(&path.display().to_string(), &content)
    }
}
