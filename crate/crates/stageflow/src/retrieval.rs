//! Windowed trajectory retrieval over the memory library.
//!
//! The robot's last W states are compared index-to-index (no warping)
//! against every window of every stored demonstration whose end-of-window
//! stage label lies within one stage of the current one; the cheapest window
//! wins, ties broken by (demo index, end index). The scan is linear in the
//! number of demonstrations and touches nothing outside the queried task.

use std::time::Instant;

use rand::Rng;

use crate::error::{Error, Result};
use crate::memory::MemoryLibrary;
use crate::rng;
use crate::segment::embed;
use crate::simenv::{ActionChunk, RobotState};

/// Most recently identified stage label; starts at 1 and is only advanced by
/// retrieval results, which the neighborhood constraint keeps within +-1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageTracker {
    k_cur: usize,
}

impl StageTracker {
    pub fn new() -> Self {
        Self { k_cur: 1 }
    }

    pub fn current(&self) -> usize {
        self.k_cur
    }

    pub fn observe(&mut self, result: &RetrievalResult) {
        debug_assert!(result.stage.abs_diff(self.k_cur) <= 1);
        self.k_cur = result.stage;
    }
}

impl Default for StageTracker {
    fn default() -> Self {
        Self::new()
    }
}

/// The last W observed robot states plus the current stage estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalQuery {
    pub window: Vec<RobotState>,
    pub k_cur: usize,
}

impl RetrievalQuery {
    /// Build a query from the state history so far, repeating the initial
    /// state when fewer than `w` states have been observed.
    pub fn from_history(history: &[RobotState], w: usize, k_cur: usize) -> Result<Self> {
        let first = *history
            .first()
            .ok_or_else(|| Error::Contract("empty state history".into()))?;
        let mut window = Vec::with_capacity(w);
        let pad = w.saturating_sub(history.len());
        for _ in 0..pad {
            window.push(first);
        }
        let start = history.len().saturating_sub(w);
        window.extend_from_slice(&history[start..]);
        debug_assert_eq!(window.len(), w);
        Ok(Self { window, k_cur })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    /// Index of the matched demonstration in the library.
    pub demo_index: usize,
    /// End index j of the matched window.
    pub end_index: usize,
    pub cost: f64,
    /// Stage label at (demo_index, end_index).
    pub stage: usize,
    /// The demonstration's next H actions from the match point, last action
    /// repeated past the episode end.
    pub demo_actions: ActionChunk,
}

/// Embedded demonstration trajectories, precomputed once per episode so the
/// per-step scan is allocation-free.
pub struct RetrievalIndex<'a> {
    pub lib: &'a MemoryLibrary,
    embedded: Vec<Vec<[f64; 3]>>,
}

impl<'a> RetrievalIndex<'a> {
    pub fn new(lib: &'a MemoryLibrary) -> Self {
        let embedded = lib
            .demos
            .iter()
            .map(|d| d.demo.states.iter().map(embed).collect())
            .collect();
        Self { lib, embedded }
    }
}

/// l2 distance between two embedded windows ending at the given slices.
fn window_cost_embedded(query: &[[f64; 3]], demo: &[[f64; 3]], j: usize) -> f64 {
    let w = query.len();
    let start = j + 1 - w;
    let mut acc = 0.0;
    for t in 0..w {
        let a = query[t];
        let b = demo[start + t];
        let d0 = a[0] - b[0];
        let d1 = a[1] - b[1];
        let d2 = a[2] - b[2];
        acc += d0 * d0 + d1 * d1 + d2 * d2;
    }
    acc.sqrt()
}

/// Window cost against a stored demonstration, windows ending at index `j`.
/// Euclidean over all W x 3 embedded components, aligned index-to-index.
pub fn window_cost(
    query_window: &[RobotState],
    demo: &crate::segment::StagedDemonstration,
    j: usize,
) -> Result<f64> {
    let w = query_window.len();
    if w == 0 || j + 1 < w || j >= demo.demo.len() {
        return Err(Error::Contract(format!(
            "window_cost: j={j} out of range for window {w} and demo length {}",
            demo.demo.len()
        )));
    }
    let q: Vec<[f64; 3]> = query_window.iter().map(embed).collect();
    let d: Vec<[f64; 3]> = demo.demo.states.iter().map(embed).collect();
    Ok(window_cost_embedded(&q, &d, j))
}

fn scan_demo(
    query: &[[f64; 3]],
    demo_emb: &[[f64; 3]],
    labels: &[usize],
    k_cur: usize,
) -> Option<(usize, f64)> {
    let w = query.len();
    if demo_emb.len() < w {
        return None;
    }
    let mut best: Option<(usize, f64)> = None;
    for j in (w - 1)..demo_emb.len() {
        if labels[j].abs_diff(k_cur) > 1 {
            continue;
        }
        let c = window_cost_embedded(query, demo_emb, j);
        if best.map_or(true, |(_, bc)| c < bc) {
            best = Some((j, c));
        }
    }
    best
}

fn finish(index: &RetrievalIndex, query: &RetrievalQuery, per_demo: Vec<Option<(usize, f64)>>) -> Result<RetrievalResult> {
    let mut best: Option<(usize, usize, f64)> = None;
    for (i, cand) in per_demo.into_iter().enumerate() {
        if let Some((j, c)) = cand {
            if best.map_or(true, |(_, _, bc)| c < bc) {
                best = Some((i, j, c));
            }
        }
    }
    let (i, j, cost) = best.ok_or(Error::RetrievalEmpty {
        k_cur: query.k_cur,
        demos: index.lib.num_demos(),
    })?;
    let staged = &index.lib.demos[i];
    let flat = crate::policy::chunk_at(&staged.demo, j, index.lib.config.horizon);
    Ok(RetrievalResult {
        demo_index: i,
        end_index: j,
        cost,
        stage: staged.stage_labels[j],
        demo_actions: ActionChunk::from_flat(&flat),
    })
}

/// Argmin window under the stage-neighborhood constraint |k - k_cur| <= 1.
/// The per-demo scan parallelizes; the cross-demo reduction is sequential in
/// demo order, so results are identical to `retrieve_serial`.
pub fn retrieve(index: &RetrievalIndex, query: &RetrievalQuery) -> Result<RetrievalResult> {
    validate_query(index, query)?;
    let q: Vec<[f64; 3]> = query.window.iter().map(embed).collect();
    let ids: Vec<usize> = (0..index.lib.num_demos()).collect();
    let per_demo = crate::par::map_slice(&ids, |&i| {
        scan_demo(
            &q,
            &index.embedded[i],
            &index.lib.demos[i].stage_labels,
            query.k_cur,
        )
    });
    finish(index, query, per_demo)
}

/// Single-threaded scan, kept callable regardless of the `parallel` feature
/// for benchmarking against the parallel path.
pub fn retrieve_serial(index: &RetrievalIndex, query: &RetrievalQuery) -> Result<RetrievalResult> {
    validate_query(index, query)?;
    let q: Vec<[f64; 3]> = query.window.iter().map(embed).collect();
    let per_demo = (0..index.lib.num_demos())
        .map(|i| {
            scan_demo(
                &q,
                &index.embedded[i],
                &index.lib.demos[i].stage_labels,
                query.k_cur,
            )
        })
        .collect();
    finish(index, query, per_demo)
}

fn validate_query(index: &RetrievalIndex, query: &RetrievalQuery) -> Result<()> {
    if index.lib.num_demos() == 0 {
        return Err(Error::RetrievalEmpty {
            k_cur: query.k_cur,
            demos: 0,
        });
    }
    let w = index.lib.config.window;
    if query.window.len() != w {
        return Err(Error::Contract(format!(
            "query window length {} != configured W {w}",
            query.window.len()
        )));
    }
    if query.k_cur == 0 || query.k_cur > index.lib.num_stages() {
        return Err(Error::Contract(format!(
            "k_cur {} outside 1..={}",
            query.k_cur,
            index.lib.num_stages()
        )));
    }
    Ok(())
}

/// One row of the retrieval latency benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct LatencyRow {
    pub num_demos: usize,
    pub mean_ms: f64,
    pub p95_ms: f64,
}

/// Measure wall-clock `retrieve` latency at several library sizes. The
/// library's demos are cycled to reach each requested size; queries are
/// jittered windows drawn from the scaled library itself.
pub fn bench_retrieval(
    lib: &MemoryLibrary,
    sizes: &[usize],
    queries_per_size: usize,
    seed: u64,
) -> Result<Vec<LatencyRow>> {
    let mut rows = Vec::with_capacity(sizes.len());
    for &n in sizes {
        if n == 0 {
            return Err(Error::Contract("benchmark size 0".into()));
        }
        let mut scaled = lib.clone();
        scaled.demos = (0..n).map(|i| lib.demos[i % lib.num_demos()].clone()).collect();
        let index = RetrievalIndex::new(&scaled);
        let mut rng = rng::stream(seed, &[rng::BENCH, n as u64]);
        let queries: Vec<RetrievalQuery> = (0..queries_per_size)
            .map(|_| random_query(&scaled, &mut rng))
            .collect();
        // warmup
        let _ = retrieve(&index, &queries[0])?;
        let mut lat = Vec::with_capacity(queries.len());
        for q in &queries {
            let t0 = Instant::now();
            let r = retrieve(&index, q)?;
            lat.push(t0.elapsed().as_secs_f64() * 1e3);
            std::hint::black_box(r);
        }
        let mean_ms = lat.iter().sum::<f64>() / lat.len() as f64;
        let mut sorted = lat.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let p95_ms = sorted[((sorted.len() as f64 * 0.95) as usize).min(sorted.len() - 1)];
        rows.push(LatencyRow {
            num_demos: n,
            mean_ms,
            p95_ms,
        });
    }
    Ok(rows)
}

/// A plausible query: a stored window with small positional jitter.
pub fn random_query(lib: &MemoryLibrary, rng: &mut rand_chacha::ChaCha8Rng) -> RetrievalQuery {
    let w = lib.config.window;
    let demo = &lib.demos[rng.gen_range(0..lib.num_demos())];
    let j = rng.gen_range(w - 1..demo.demo.len());
    let mut window: Vec<RobotState> = demo.demo.states[j + 1 - w..=j].to_vec();
    for s in &mut window {
        s.position[0] = (s.position[0] + 0.01 * rng::normal(rng)).clamp(0.0, 1.0);
        s.position[1] = (s.position[1] + 0.01 * rng::normal(rng)).clamp(0.0, 1.0);
    }
    RetrievalQuery {
        window,
        k_cur: demo.stage_labels[j],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::{LibraryConfig, SoftPrompt};
    use crate::policy::PromptMatrix;
    use crate::segment::{segment_demos, StagedDemonstration};
    use crate::simenv::{bundled_task, gen_demos};

    /// Library with zero prompts; retrieval only needs demos + labels.
    fn test_library(num_demos: usize, window: usize) -> MemoryLibrary {
        let task = bundled_task(1).unwrap();
        let demos = gen_demos(&task, num_demos, 13, 0.005).unwrap();
        let seg = segment_demos(&demos, 0.02).unwrap();
        let k = seg.segmentation.num_stages();
        MemoryLibrary {
            task_id: task.task_id,
            prompts: (1..=k)
                .map(|stage| SoftPrompt {
                    v: PromptMatrix::zeros(2, 4),
                    stage,
                    task_id: task.task_id,
                })
                .collect(),
            demos: seg.staged,
            segmentation: seg.segmentation,
            config: LibraryConfig {
                m: 2,
                d: 4,
                horizon: 4,
                window,
                epsilon_rdp: seg.epsilon,
            },
        }
    }

    /// Brute-force argmin over all (i, j), optionally constrained.
    fn brute_force(
        lib: &MemoryLibrary,
        query: &RetrievalQuery,
        constrained: bool,
    ) -> Option<(usize, usize, f64)> {
        let w = query.window.len();
        let mut best: Option<(usize, usize, f64)> = None;
        for (i, demo) in lib.demos.iter().enumerate() {
            for j in (w - 1)..demo.demo.len() {
                if constrained && demo.stage_labels[j].abs_diff(query.k_cur) > 1 {
                    continue;
                }
                let c = window_cost(&query.window, demo, j).unwrap();
                if best.map_or(true, |(_, _, bc)| c < bc) {
                    best = Some((i, j, c));
                }
            }
        }
        best
    }

    #[test]
    fn window_cost_zero_on_exact_match() {
        let lib = test_library(3, 5);
        let demo = &lib.demos[1];
        let j = 9;
        let window = demo.demo.states[j - 4..=j].to_vec();
        assert_eq!(window_cost(&window, demo, j).unwrap(), 0.0);
    }

    #[test]
    fn window_cost_direct_arithmetic() {
        // W=2, 1-D offsets: query [1,2] vs demo window [1,3] -> sqrt(0+1) = 1
        let mk = |x: f64| RobotState {
            position: [x, 0.0],
            gripper: 0.0,
        };
        let demo = StagedDemonstration {
            demo: crate::simenv::Demonstration {
                observations: vec![],
                actions: vec![crate::simenv::Action::zero(); 2],
                states: vec![mk(1.0), mk(3.0)],
                task_id: 0,
            },
            stage_labels: vec![1, 1],
        };
        let q = vec![mk(1.0), mk(2.0)];
        let c = window_cost(&q, &demo, 1).unwrap();
        assert!((c - 1.0).abs() < 1e-15);
    }

    #[test]
    fn window_cost_matches_sum_of_squares_oracle() {
        use rand::Rng;
        let lib = test_library(2, 6);
        let mut rng = crate::rng::stream(3, &[crate::rng::BENCH]);
        for _ in 0..50 {
            let demo = &lib.demos[rng.gen_range(0..lib.demos.len())];
            let j = rng.gen_range(5..demo.demo.len());
            let window: Vec<RobotState> = (0..6)
                .map(|_| RobotState {
                    position: [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)],
                    gripper: rng.gen_range(0.0..1.0),
                })
                .collect();
            let got = window_cost(&window, demo, j).unwrap();
            let mut acc = 0.0;
            for (t, s) in window.iter().enumerate() {
                let a = embed(s);
                let b = embed(&demo.demo.states[j + 1 - 6 + t]);
                for c in 0..3 {
                    acc += (a[c] - b[c]) * (a[c] - b[c]);
                }
            }
            assert!((got - acc.sqrt()).abs() <= 1e-12);
        }
    }

    #[test]
    fn window_cost_rejects_out_of_range() {
        let lib = test_library(1, 5);
        let demo = &lib.demos[0];
        let window = demo.demo.states[0..5].to_vec();
        assert!(window_cost(&window, demo, 3).is_err());
        assert!(window_cost(&window, demo, demo.demo.len()).is_err());
    }

    #[test]
    fn self_retrieval_hits_own_window_at_zero_cost() {
        let lib = test_library(1, 8);
        let index = RetrievalIndex::new(&lib);
        let demo = &lib.demos[0];
        let j = 20;
        let query = RetrievalQuery {
            window: demo.demo.states[j - 7..=j].to_vec(),
            k_cur: demo.stage_labels[j],
        };
        let r = retrieve(&index, &query).unwrap();
        assert_eq!(r.cost, 0.0);
        assert_eq!(r.demo_index, 0);
        assert_eq!(r.end_index, j);
        assert_eq!(r.stage, demo.stage_labels[j]);
        assert_eq!(r.demo_actions.horizon(), lib.config.horizon);
    }

    #[test]
    fn matches_brute_force_and_respects_constraint() {
        use rand::Rng;
        let lib = test_library(6, 10);
        let index = RetrievalIndex::new(&lib);
        let mut rng = crate::rng::stream(5, &[crate::rng::BENCH]);
        let k = lib.num_stages();
        let mut constraint_active_seen = false;
        for _ in 0..60 {
            let mut query = random_query(&lib, &mut rng);
            query.k_cur = rng.gen_range(1..=k);
            let got = retrieve(&index, &query).unwrap();
            let (bi, bj, bc) = brute_force(&lib, &query, true).unwrap();
            assert_eq!((got.demo_index, got.end_index), (bi, bj));
            assert_eq!(got.cost, bc);
            assert!(got.stage.abs_diff(query.k_cur) <= 1);
            // serial path identical
            let serial = retrieve_serial(&index, &query).unwrap();
            assert_eq!(serial, got);
            // when the unconstrained optimum violates the constraint, the
            // constrained result must differ from it
            if let Some((ui, uj, uc)) = brute_force(&lib, &query, false) {
                let u_stage = lib.demos[ui].stage_labels[uj];
                if u_stage.abs_diff(query.k_cur) <= 1 {
                    assert_eq!((got.demo_index, got.end_index, got.cost), (ui, uj, uc));
                } else {
                    constraint_active_seen = true;
                    assert_ne!((got.demo_index, got.end_index), (ui, uj));
                }
            }
        }
        assert!(
            constraint_active_seen,
            "test never exercised an active constraint"
        );
    }

    #[test]
    fn unconstrained_equality_when_all_labels_near() {
        // Query k_cur in the middle of a 3-stage relabeled library: every
        // label within +-1, so the constraint is inactive.
        let mut lib = test_library(4, 10);
        for demo in &mut lib.demos {
            for l in &mut demo.stage_labels {
                *l = (*l % 3) + 1;
            }
        }
        let index = RetrievalIndex::new(&lib);
        let mut rng = crate::rng::stream(11, &[crate::rng::BENCH]);
        for _ in 0..20 {
            let mut query = random_query(&lib, &mut rng);
            query.k_cur = 2;
            let got = retrieve(&index, &query).unwrap();
            let (bi, bj, bc) = brute_force(&lib, &query, false).unwrap();
            assert_eq!((got.demo_index, got.end_index, got.cost), (bi, bj, bc));
        }
    }

    #[test]
    fn empty_candidate_set_is_an_error() {
        let mut lib = test_library(2, 10);
        // Labels far from any queried stage make the candidate set empty.
        for demo in &mut lib.demos {
            for l in &mut demo.stage_labels {
                *l = 10;
            }
        }
        let index = RetrievalIndex::new(&lib);
        let window = lib.demos[0].demo.states[0..10].to_vec();
        let query = RetrievalQuery { window, k_cur: 1 };
        match retrieve(&index, &query) {
            Err(Error::RetrievalEmpty { .. }) => {}
            other => panic!("expected retrieval-empty, got {other:?}"),
        }
    }

    #[test]
    fn deterministic_tie_break_prefers_lower_demo_index() {
        // Two identical demos: the matching window exists in both; demo 0 wins.
        let lib0 = test_library(1, 8);
        let mut lib = lib0.clone();
        lib.demos = vec![lib0.demos[0].clone(), lib0.demos[0].clone()];
        let index = RetrievalIndex::new(&lib);
        let demo = &lib.demos[1];
        let j = 15;
        let query = RetrievalQuery {
            window: demo.demo.states[j - 7..=j].to_vec(),
            k_cur: demo.stage_labels[j],
        };
        let r = retrieve(&index, &query).unwrap();
        assert_eq!(r.demo_index, 0);
        assert_eq!(r.cost, 0.0);
    }

    #[test]
    fn query_padding_repeats_initial_state() {
        let history = vec![
            RobotState {
                position: [0.5, 0.1],
                gripper: 0.0,
            },
            RobotState {
                position: [0.6, 0.2],
                gripper: 0.0,
            },
        ];
        let q = RetrievalQuery::from_history(&history, 5, 1).unwrap();
        assert_eq!(q.window.len(), 5);
        assert_eq!(q.window[0], history[0]);
        assert_eq!(q.window[2], history[0]);
        assert_eq!(q.window[3], history[0]);
        assert_eq!(q.window[4], history[1]);
    }

    #[test]
    fn latency_scales_roughly_linearly() {
        let lib = test_library(4, 10);
        let rows = bench_retrieval(&lib, &[10, 80], 40, 3).unwrap();
        assert_eq!(rows.len(), 2);
        // Generous sanity bound: 8x the demos should cost well under 10x
        // the small-N mean (constant overheads only help).
        assert!(
            rows[1].mean_ms <= 10.0 * rows[0].mean_ms.max(1e-4),
            "N=80 mean {} vs N=10 mean {}",
            rows[1].mean_ms,
            rows[0].mean_ms
        );
    }
}
