//! Stage segmentation and cross-demonstration alignment.
//!
//! A reference demonstration is simplified with Ramer-Douglas-Peucker to find
//! key poses (sharp turns and gripper toggles), stage boundaries are placed
//! at midpoints between consecutive key poses so each stage brackets its key
//! pose, and every other demonstration inherits the stage labels through a
//! dynamic-time-warping alignment to the reference.

use log::warn;

use crate::error::{Error, Result};
use crate::simenv::{Demonstration, RobotState};
use crate::textio::{TextReader, TextWriter};

/// Weight of the gripper component in the state embedding used by RDP, DTW
/// and retrieval. Large enough that a gripper toggle registers as a corner,
/// small enough not to dominate spatial geometry.
pub const GRIPPER_WEIGHT: f64 = 1.0;

/// Embed a robot state as (x, y, gripper * weight).
pub fn embed(s: &RobotState) -> [f64; 3] {
    [s.position[0], s.position[1], s.gripper * GRIPPER_WEIGHT]
}

fn embed_all(states: &[RobotState]) -> Vec<[f64; 3]> {
    states.iter().map(embed).collect()
}

fn dist3(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d0 = a[0] - b[0];
    let d1 = a[1] - b[1];
    let d2 = a[2] - b[2];
    (d0 * d0 + d1 * d1 + d2 * d2).sqrt()
}

/// Perpendicular distance from `p` to the chord from `a` to `b`, with the
/// projection clamped to the chord so points beyond either end measure
/// against the nearer endpoint.
pub fn chord_distance(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1] + ab[2] * ab[2];
    if len2 == 0.0 {
        return dist3(p, a);
    }
    let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
    let t = ((ap[0] * ab[0] + ap[1] * ab[1] + ap[2] * ab[2]) / len2).clamp(0.0, 1.0);
    let closest = [a[0] + t * ab[0], a[1] + t * ab[1], a[2] + t * ab[2]];
    dist3(p, closest)
}

/// Key-pose indices into a reference trajectory; endpoints always included.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyPoseSet {
    indices: Vec<usize>,
}

impl KeyPoseSet {
    pub fn new(indices: Vec<usize>) -> Result<Self> {
        if indices.len() < 2 || indices[0] != 0 {
            return Err(Error::InvalidKeys(format!(
                "need at least the two endpoints starting at 0, got {indices:?}"
            )));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidKeys(format!(
                "indices not strictly increasing: {indices:?}"
            )));
        }
        Ok(Self { indices })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Last index, i.e. the final timestep of the reference trajectory.
    pub fn end(&self) -> usize {
        *self.indices.last().unwrap()
    }
}

/// Ramer-Douglas-Peucker simplification on the embedded trajectory. A point
/// survives iff, at some recursion level, its chord distance exceeds
/// `epsilon`; endpoints always survive.
pub fn rdp(trajectory: &[RobotState], epsilon: f64) -> Result<KeyPoseSet> {
    if trajectory.len() < 2 {
        return Err(Error::InvalidTrajectory(format!(
            "rdp needs >= 2 states, got {}",
            trajectory.len()
        )));
    }
    if !(epsilon > 0.0) {
        return Err(Error::Contract(format!("rdp epsilon must be > 0, got {epsilon}")));
    }
    if trajectory.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidTrajectory("non-finite state in rdp input".into()));
    }
    let pts = embed_all(trajectory);
    let n = pts.len();
    let mut keep = vec![false; n];
    keep[0] = true;
    keep[n - 1] = true;

    let mut stack = vec![(0usize, n - 1)];
    while let Some((lo, hi)) = stack.pop() {
        if hi <= lo + 1 {
            continue;
        }
        let (a, b) = (pts[lo], pts[hi]);
        let mut best = (lo, f64::NEG_INFINITY);
        for i in lo + 1..hi {
            let d = chord_distance(pts[i], a, b);
            if d > best.1 {
                best = (i, d);
            }
        }
        if best.1 > epsilon {
            keep[best.0] = true;
            stack.push((lo, best.0));
            stack.push((best.0, hi));
        }
    }

    let indices = (0..n).filter(|&i| keep[i]).collect();
    KeyPoseSet::new(indices)
}

/// Contiguous partition of [0, n] into K stages, one per key pose.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageSegmentation {
    /// K-1 interior boundaries, strictly increasing.
    boundaries: Vec<usize>,
    num_stages: usize,
    /// Reference trajectory length (last index + 1).
    ref_len: usize,
}

impl StageSegmentation {
    pub fn new(boundaries: Vec<usize>, num_stages: usize, ref_len: usize) -> Result<Self> {
        if boundaries.len() + 1 != num_stages
            || boundaries.windows(2).any(|w| w[0] >= w[1])
            || boundaries.iter().any(|&b| b == 0 || b >= ref_len)
        {
            return Err(Error::InvalidKeys(format!(
                "bad segmentation: boundaries {boundaries:?}, K={num_stages}, len={ref_len}"
            )));
        }
        Ok(Self {
            boundaries,
            num_stages,
            ref_len,
        })
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    pub fn num_stages(&self) -> usize {
        self.num_stages
    }

    pub fn ref_len(&self) -> usize {
        self.ref_len
    }

    /// 1-based stage label of a reference index: stage k spans
    /// [b_{k-1}, b_k) with b_0 = 0 and b_K = ref_len.
    pub fn stage_of(&self, idx: usize) -> usize {
        debug_assert!(idx < self.ref_len);
        1 + self.boundaries.iter().take_while(|&&b| b <= idx).count()
    }
}

/// Place one boundary at the midpoint of each consecutive key-pose pair.
pub fn make_stages(keys: &KeyPoseSet) -> Result<StageSegmentation> {
    let idx = keys.indices();
    let boundaries: Vec<usize> = idx.windows(2).map(|w| (w[0] + w[1]) / 2).collect();
    StageSegmentation::new(boundaries, idx.len(), keys.end() + 1)
}

/// Monotone alignment between a reference and a query sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WarpingPath {
    pairs: Vec<(usize, usize)>,
}

impl WarpingPath {
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }
}

/// Classic dynamic-programming DTW with steps {(1,0),(0,1),(1,1)} and
/// Euclidean pointwise distance on the embedded states. Returns the optimal
/// path (diagonal preferred on backtrack ties) and its cumulative cost.
pub fn dtw(reference: &[RobotState], query: &[RobotState]) -> Result<(WarpingPath, f64)> {
    if reference.is_empty() || query.is_empty() {
        return Err(Error::InvalidSequence("dtw input must be non-empty".into()));
    }
    let r = embed_all(reference);
    let q = embed_all(query);
    let (n, m) = (r.len(), q.len());

    let mut acc = vec![f64::INFINITY; n * m];
    for i in 0..n {
        for j in 0..m {
            let d = dist3(r[i], q[j]);
            let best = if i == 0 && j == 0 {
                0.0
            } else {
                let diag = if i > 0 && j > 0 { acc[(i - 1) * m + j - 1] } else { f64::INFINITY };
                let up = if i > 0 { acc[(i - 1) * m + j] } else { f64::INFINITY };
                let left = if j > 0 { acc[i * m + j - 1] } else { f64::INFINITY };
                diag.min(up).min(left)
            };
            acc[i * m + j] = d + best;
        }
    }

    let cost = acc[(n - 1) * m + m - 1];
    let mut pairs = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n - 1, m - 1);
    pairs.push((i, j));
    while i > 0 || j > 0 {
        let diag = if i > 0 && j > 0 { acc[(i - 1) * m + j - 1] } else { f64::INFINITY };
        let up = if i > 0 { acc[(i - 1) * m + j] } else { f64::INFINITY };
        let left = if j > 0 { acc[i * m + j - 1] } else { f64::INFINITY };
        if diag <= up && diag <= left {
            i -= 1;
            j -= 1;
        } else if up <= left {
            i -= 1;
        } else {
            j -= 1;
        }
        pairs.push((i, j));
    }
    pairs.reverse();
    Ok((WarpingPath { pairs }, cost))
}

/// A demonstration with per-timestep 1-based stage labels.
#[derive(Debug, Clone, PartialEq)]
pub struct StagedDemonstration {
    pub demo: Demonstration,
    pub stage_labels: Vec<usize>,
}

impl StagedDemonstration {
    pub fn num_stages(&self) -> usize {
        self.stage_labels.iter().copied().max().unwrap_or(0)
    }

    /// Timestep indices carrying stage label `k`.
    pub fn stage_indices(&self, k: usize) -> impl Iterator<Item = usize> + '_ {
        self.stage_labels
            .iter()
            .enumerate()
            .filter(move |(_, &l)| l == k)
            .map(|(i, _)| i)
    }
}

/// Transfer the reference segmentation onto `demo` along `path`: each query
/// timestep takes the stage of the first reference index matched to it.
pub fn align_stages(
    ref_seg: &StageSegmentation,
    path: &WarpingPath,
    demo: &Demonstration,
) -> Result<StagedDemonstration> {
    let n_query = demo.len();
    let (first, last) = (
        *path.pairs.first().ok_or_else(|| Error::InvalidSequence("empty path".into()))?,
        *path.pairs.last().unwrap(),
    );
    if first != (0, 0) || last != (ref_seg.ref_len - 1, n_query - 1) {
        return Err(Error::Contract(format!(
            "path endpoints {first:?}..{last:?} do not match ref len {} / query len {n_query}",
            ref_seg.ref_len
        )));
    }

    let mut labels = vec![0usize; n_query];
    for &(r, q) in &path.pairs {
        if labels[q] == 0 {
            labels[q] = ref_seg.stage_of(r);
        }
    }
    debug_assert!(labels.windows(2).all(|w| w[0] <= w[1]), "labels must be non-decreasing");

    for k in 1..=ref_seg.num_stages() {
        if !labels.contains(&k) {
            return Err(Error::AlignmentDegenerate { stage: k });
        }
    }
    Ok(StagedDemonstration {
        demo: demo.clone(),
        stage_labels: labels,
    })
}

/// Index of the reference demonstration: shortest episode, ties to the
/// earliest (lowest generation seed).
pub fn select_reference(demos: &[Demonstration]) -> usize {
    demos
        .iter()
        .enumerate()
        .min_by_key(|(i, d)| (d.len(), *i))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

/// Per-task segmentation of the full pipeline: segmentation derived from the
/// reference plus the reference key poses and all successfully aligned
/// demonstrations. Demonstrations whose alignment leaves a stage empty are
/// rejected with a warning.
#[derive(Debug, Clone)]
pub struct SegmentedTask {
    pub staged: Vec<StagedDemonstration>,
    pub segmentation: StageSegmentation,
    pub key_poses: KeyPoseSet,
    pub reference_index: usize,
    pub epsilon: f64,
}

pub fn segment_demos(demos: &[Demonstration], epsilon: f64) -> Result<SegmentedTask> {
    if demos.is_empty() {
        return Err(Error::InvalidSequence("no demonstrations to segment".into()));
    }
    let reference_index = select_reference(demos);
    let reference = &demos[reference_index];
    let key_poses = rdp(&reference.states, epsilon)?;
    let segmentation = make_stages(&key_poses)?;

    let aligned = crate::par::map_slice(demos, |demo| {
        let (path, _) = dtw(&reference.states, &demo.states)?;
        align_stages(&segmentation, &path, demo)
    });
    let mut staged = Vec::with_capacity(demos.len());
    for (i, result) in aligned.into_iter().enumerate() {
        match result {
            Ok(s) => staged.push(s),
            Err(Error::AlignmentDegenerate { stage }) => {
                warn!("demo {i}: rejected, stage {stage} received no timesteps");
            }
            Err(e) => return Err(e),
        }
    }
    if staged.is_empty() {
        return Err(Error::AlignmentDegenerate { stage: 0 });
    }
    Ok(SegmentedTask {
        staged,
        segmentation,
        key_poses,
        reference_index,
        epsilon,
    })
}

/// Segmentation sidecar file for a directory of staged demonstrations.
pub fn segmentation_to_text(seg: &SegmentedTask, task_id: u32) -> String {
    let mut w = TextWriter::new("segmentation", 1);
    w.kv("task_id", task_id);
    w.kv("num_stages", seg.segmentation.num_stages());
    w.kv("ref_len", seg.segmentation.ref_len());
    w.kv("reference_index", seg.reference_index);
    w.kv_f64("epsilon", seg.epsilon);
    let keys: Vec<i64> = seg.key_poses.indices().iter().map(|&i| i as i64).collect();
    w.ints("key_poses", &keys);
    let bounds: Vec<i64> = seg.segmentation.boundaries().iter().map(|&b| b as i64).collect();
    w.ints("boundaries", &bounds);
    w.finish()
}

pub fn segmentation_from_text(
    label: &str,
    content: &str,
) -> Result<(StageSegmentation, KeyPoseSet, usize, f64, u32)> {
    let mut r = TextReader::from_string(label, content);
    r.expect_header("segmentation", 1)?;
    let task_id: u32 = r.kv_parse("task_id")?;
    let num_stages: usize = r.kv_parse("num_stages")?;
    let ref_len: usize = r.kv_parse("ref_len")?;
    let reference_index: usize = r.kv_parse("reference_index")?;
    let epsilon: f64 = r.kv_parse("epsilon")?;
    let keys: Vec<usize> = r.ints("key_poses")?.into_iter().map(|i| i as usize).collect();
    let bounds: Vec<usize> = r.ints("boundaries")?.into_iter().map(|i| i as usize).collect();
    let key_poses = KeyPoseSet::new(keys).map_err(|e| Error::InvariantViolation {
        path: label.to_string(),
        reason: e.to_string(),
    })?;
    let seg = StageSegmentation::new(bounds, num_stages, ref_len).map_err(|e| {
        Error::InvariantViolation {
            path: label.to_string(),
            reason: e.to_string(),
        }
    })?;
    Ok((seg, key_poses, reference_index, epsilon, task_id))
}
