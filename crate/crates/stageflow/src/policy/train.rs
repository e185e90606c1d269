//! Flow-matching training loop.
//!
//! Gradients are accumulated over fixed index-range chunks of each batch and
//! combined in chunk order, so results are bit-identical with and without
//! the `parallel` feature.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::simenv::{Action, Demonstration};

use super::{obs_features, PolicyConfig, PolicyParams, PromptMatrix};

/// One (observation, target action chunk) pair; the chunk is stored in the
/// normalized flow space.
#[derive(Debug, Clone)]
pub struct Sample {
    pub obs_feat: Vec<f64>,
    pub chunk: Vec<f64>,
}

/// Training pairs extracted from demonstrations: the chunk at time t holds
/// the next H actions, padded past the episode end by repeating the final
/// action.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn from_demos(demos: &[Demonstration], cfg: &PolicyConfig) -> Result<Self> {
        let mut samples = Vec::new();
        for demo in demos {
            demo.validate()?;
            samples.extend(Self::demo_samples(demo, cfg)?);
        }
        if samples.is_empty() {
            return Err(Error::Contract("empty training dataset".into()));
        }
        Ok(Self { samples })
    }

    pub fn demo_samples(demo: &Demonstration, cfg: &PolicyConfig) -> Result<Vec<Sample>> {
        let n = demo.len();
        (0..n)
            .map(|t| {
                Ok(Sample {
                    obs_feat: obs_features(&demo.observations[t], cfg)?,
                    chunk: super::normalize_chunk(&chunk_at(demo, t, cfg.horizon)),
                })
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Flattened H-step action chunk starting at t, last action repeated at the end.
pub fn chunk_at(demo: &Demonstration, t: usize, horizon: usize) -> Vec<f64> {
    let n = demo.len();
    let mut flat = Vec::with_capacity(horizon * Action::DIM);
    for h in 0..horizon {
        let a = demo.actions[(t + h).min(n - 1)];
        flat.push(a.delta[0]);
        flat.push(a.delta[1]);
        flat.push(a.gripper_cmd);
    }
    flat
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch: 64,
            lr: 1e-3,
        }
    }
}

/// Adam over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, dim: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), grad.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// One pre-drawn stochastic batch element.
#[derive(Debug, Clone)]
pub struct BatchItem {
    pub sample_idx: usize,
    pub tau: f64,
    pub eps: Vec<f64>,
}

/// Draw a batch: indices, flow times and noise all come from `rng` in a
/// fixed order, independent of how gradients are later parallelized.
pub fn draw_batch(
    rng: &mut rand_chacha::ChaCha8Rng,
    dataset_len: usize,
    batch: usize,
    chunk_dim: usize,
) -> Vec<BatchItem> {
    (0..batch)
        .map(|_| BatchItem {
            sample_idx: rng.gen_range(0..dataset_len),
            tau: rng.gen::<f64>(),
            eps: rng::normal_vec(rng, chunk_dim),
        })
        .collect()
}

/// Per-sample squared flow-matching error and its gradients.
///
/// Returns the loss; accumulates d(loss)/d(theta) into `theta_grad` when
/// given, and d(loss)/d(prompt tokens) into `prompt_grad` when given. The
/// prompt fed to the trunk is encoder(obs) plus `soft` when given.
pub fn sample_loss_grad(
    params: &PolicyParams,
    sample: &Sample,
    tau: f64,
    eps: &[f64],
    soft: Option<&PromptMatrix>,
    mut theta_grad: Option<&mut [f64]>,
    prompt_grad: Option<&mut [f64]>,
) -> f64 {
    let (a_tau, u) =
        super::flow_parts(&sample.chunk, tau, eps).expect("tau in [0,1] by construction");

    let mut prompt = params.encode_features(&sample.obs_feat);
    if let Some(v) = soft {
        debug_assert_eq!(v.shape(), prompt.shape());
        for (p, o) in prompt.data_mut().iter_mut().zip(v.data()) {
            *p += o;
        }
    }
    let cache = params.forward_cached(&a_tau, tau, &prompt);

    let dim = u.len();
    let mut d_out = vec![0.0; dim];
    let mut loss = 0.0;
    for i in 0..dim {
        let r = cache.output[i] - u[i];
        loss += r * r;
        d_out[i] = 2.0 * r;
    }

    if theta_grad.is_some() || prompt_grad.is_some() {
        let mut d_prompt = vec![0.0; params.cfg.prompt_dim()];
        params.backward(&cache, &d_out, theta_grad.as_deref_mut(), &mut d_prompt);
        if let Some(tg) = theta_grad {
            // encoder chain: prompt = enc_w * obs + enc_b (+ soft, constant)
            params.encoder_grad(&sample.obs_feat, &d_prompt, tg);
        }
        if let Some(pg) = prompt_grad {
            for (g, d) in pg.iter_mut().zip(&d_prompt) {
                *g += d;
            }
        }
    }
    loss
}

/// Mean batch loss and mean theta gradient, deterministically chunked.
pub fn batch_loss_grad(
    params: &PolicyParams,
    dataset: &Dataset,
    items: &[BatchItem],
    theta_grad: &mut [f64],
) -> f64 {
    const CHUNK: usize = 8;
    let ranges: Vec<(usize, usize)> = (0..items.len())
        .step_by(CHUNK)
        .map(|s| (s, (s + CHUNK).min(items.len())))
        .collect();
    let partials = crate::par::map_slice(&ranges, |&(lo, hi)| {
        let mut grad = vec![0.0; theta_grad.len()];
        let mut loss = 0.0;
        for item in &items[lo..hi] {
            loss += sample_loss_grad(
                params,
                &dataset.samples[item.sample_idx],
                item.tau,
                &item.eps,
                None,
                Some(&mut grad),
                None,
            );
        }
        (loss, grad)
    });
    let scale = 1.0 / items.len() as f64;
    let mut total = 0.0;
    for (loss, grad) in partials {
        total += loss;
        for (g, p) in theta_grad.iter_mut().zip(&grad) {
            *g += p * scale;
        }
    }
    total * scale
}

/// Train the base policy by Adam on the flow-matching objective.
/// Returns the parameters and the per-step batch loss curve.
pub fn train_base(
    demos: &[Demonstration],
    cfg: PolicyConfig,
    tcfg: &TrainConfig,
    seed: u64,
) -> Result<(PolicyParams, Vec<f64>)> {
    if demos.is_empty() {
        return Err(Error::Contract("train_base needs at least one demonstration".into()));
    }
    let dataset = Dataset::from_demos(demos, &cfg)?;
    let mut params = PolicyParams::init(cfg, seed);
    let mut rng = rng::stream(seed, &[rng::TRAIN]);
    let mut adam = Adam::new(tcfg.lr, params.theta().len());
    let mut grad = vec![0.0; params.theta().len()];
    let mut curve = Vec::with_capacity(tcfg.steps);

    for step in 0..tcfg.steps {
        let items = draw_batch(&mut rng, dataset.len(), tcfg.batch, cfg.chunk_dim());
        grad.fill(0.0);
        let loss = batch_loss_grad(&params, &dataset, &items, &mut grad);
        if !loss.is_finite() {
            return Err(Error::TrainingFailure(format!(
                "loss became non-finite at step {step}"
            )));
        }
        adam.step(params.theta_mut(), &grad);
        curve.push(loss);
    }
    Ok((params, curve))
}

/// Mean loss over a fixed evaluation set; no gradients, fully deterministic.
pub fn eval_loss(
    params: &PolicyParams,
    dataset: &Dataset,
    items: &[BatchItem],
    soft: Option<&PromptMatrix>,
) -> f64 {
    let losses = crate::par::map_slice(items, |item| {
        sample_loss_grad(
            params,
            &dataset.samples[item.sample_idx],
            item.tau,
            &item.eps,
            soft,
            None,
            None,
        )
    });
    losses.iter().sum::<f64>() / items.len().max(1) as f64
}
