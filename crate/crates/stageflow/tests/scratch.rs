//! Temporary diagnostics (not part of the shipped suite).

use stageflow::execution::{run_episode, RolloutMode};
use stageflow::harness::{build_pipeline, PipelineConfig};
use stageflow::simenv::bundled_task;

fn success_rate(pipeline: &stageflow::harness::Pipeline, task_id: u32, n: u64) -> f64 {
    let task = bundled_task(task_id).unwrap();
    let jobs: Vec<u64> = (0..n).collect();
    let oks = stageflow::par::map_slice(&jobs, |&r| {
        run_episode(&pipeline.params, &RolloutMode::Base, &task, 1000 + r, 0.0)
            .unwrap()
            .trace
            .success
    });
    oks.iter().filter(|&&b| b).count() as f64 / n as f64
}

#[test]
#[ignore]
fn diagnose() {
    for tasks in [vec![0u32, 1, 2]] {
        let mut cfg = PipelineConfig::default();
        cfg.master_seed = 0;
        cfg.demos.per_task = 40;
        cfg.train.steps = 30000;
        cfg.eval.tasks = tasks.clone();
        let pipeline = build_pipeline(&cfg).unwrap();
        let c = &pipeline.train_loss_curve;
        let w = 100;
        let smooth = |at: usize| -> f64 {
            let lo = at.saturating_sub(w / 2).min(c.len() - w);
            c[lo..lo + w].iter().sum::<f64>() / w as f64
        };
        print!(
            "tasks {:?}: loss s100 {:.2} s2000 {:.2} final {:.2} | success:",
            tasks,
            smooth(100),
            smooth(2000),
            smooth(c.len() - 1)
        );
        for &t in &tasks {
            print!(" t{}={:.0}%", t, 100.0 * success_rate(&pipeline, t, 20));
        }
        println!();
    }
}
