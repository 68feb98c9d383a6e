//! Multi-mode training loop with best-k checkpoint retention.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Utterance;
use crate::error::{contract, Error, Result};
use crate::losses::{mode_pair_loss, transducer_loss_op, LossBundle, LossOptions, LossWeights};
use crate::masking::{sample_schedule, ContextSchedule, SamplerSpec};
use crate::model::{forward_lattice, init_params, Dropout, ModelConfig};
use crate::params::ParamSet;
use crate::tensor::Graph;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Decay {
    InverseSqrt,
    /// Hold the peak for `hold` steps, then multiply by `decay_rate` every step.
    HoldExp {
        hold: usize,
        decay_rate: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub warmup_steps: usize,
    pub peak_lr: f64,
    pub decay: Decay,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            warmup_steps: 200,
            peak_lr: 2e-3,
            // 1300 decay steps down to 5% of the peak
            decay: Decay::HoldExp {
                hold: 500,
                decay_rate: 0.05f64.powf(1.0 / 1300.0),
            },
        }
    }
}

impl LrSchedule {
    /// Learning rate for 1-based `step`.
    pub fn at(&self, step: usize) -> f64 {
        let warm = self.warmup_steps;
        if step <= warm {
            return self.peak_lr * step as f64 / warm as f64;
        }
        match self.decay {
            Decay::InverseSqrt => self.peak_lr * (warm.max(1) as f64 / step as f64).sqrt(),
            Decay::HoldExp { hold, decay_rate } => {
                let after = step - warm;
                if after <= hold {
                    self.peak_lr
                } else {
                    self.peak_lr * decay_rate.powi((after - hold) as i32)
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub sampler: SamplerSpec,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub seed: u64,
    pub s_shift: usize,
    pub eval_every: usize,
    pub keep_best_k: usize,
    pub weights: LossWeights,
    pub attn_dropout: f64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            sampler: SamplerSpec::TiedUniform { lo: 0, hi: 2 },
            steps: 2000,
            batch_size: 8,
            lr: LrSchedule::default(),
            seed: 1,
            s_shift: 0,
            eval_every: 100,
            keep_best_k: 3,
            weights: LossWeights::default(),
            attn_dropout: 0.1,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        if self.steps == 0 || self.batch_size == 0 || self.eval_every == 0 || self.keep_best_k == 0 {
            return Err(contract(
                "steps, batch_size, eval_every and keep_best_k must be positive",
            ));
        }
        if !(0.0..1.0).contains(&self.attn_dropout) {
            return Err(contract("attn_dropout must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub l_stream: f64,
    pub l_full: f64,
    pub l_distill: f64,
    pub total: f64,
    pub schedule: String,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub step: usize,
    pub val_loss: f64,
    pub params: ParamSet<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best checkpoints by validation loss, best first.
    pub best: Vec<Checkpoint>,
    pub last: ParamSet<f64>,
}

impl TrainOutcome {
    pub fn averaged(&self) -> Result<ParamSet<f64>> {
        average_checkpoints(&self.best.iter().map(|c| &c.params).collect::<Vec<_>>())
    }
}

/// Elementwise mean of checkpoints with identical layout.
pub fn average_checkpoints(checkpoints: &[&ParamSet<f64>]) -> Result<ParamSet<f64>> {
    ParamSet::average(checkpoints)
}

/// Schedule used to score checkpoints: full context whenever the full branch
/// is trained; otherwise the smallest lookahead in the sampler's support, so
/// a streaming-only model is never scored in a mode it has not seen.
pub fn validation_schedule(train_cfg: &TrainConfig, layers: usize) -> ContextSchedule {
    if train_cfg.weights.uses_full_branch() {
        return ContextSchedule::full(layers);
    }
    match train_cfg.sampler {
        SamplerSpec::FullContext => ContextSchedule::full(layers),
        SamplerSpec::Fixed(c) => ContextSchedule::fixed(c, layers),
        SamplerSpec::TiedUniform { lo, .. } | SamplerSpec::UntiedUniform { lo, .. } => {
            ContextSchedule::fixed(lo, layers)
        }
        _ => ContextSchedule::fixed(0, layers),
    }
}

/// Mean transducer loss per utterance under `schedule`, dropout off.
pub fn validation_loss(
    params: &ParamSet<f64>,
    cfg: &ModelConfig,
    data: &[Utterance],
    schedule: &ContextSchedule,
) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for u in data {
        let mut g = Graph::new();
        let b = params.bind(&mut g, false);
        let lat = forward_lattice(&mut g, &b, cfg, &u.features, &u.tokens, schedule, &mut Dropout::eval())?;
        let l = transducer_loss_op(&mut g, lat, &u.tokens)?;
        sum += g.value(l).item();
    }
    Ok(sum / data.len() as f64)
}

struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    fn new(cfg: AdamConfig, params: &ParamSet<f64>) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, params: &mut ParamSet<f64>, lr: f64) {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for (i, (_, t)) in params.iter_mut().enumerate() {
            let Some(grad) = t.grad.take() else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, p) in t.data_mut().iter_mut().enumerate() {
                let gj = grad[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                *p -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
            }
            t.grad = Some(grad);
        }
    }
}

// independent generator streams derived from the run seed
const STREAM_INIT: u64 = 0;
const STREAM_SCHEDULE: u64 = 1;
const STREAM_BATCH: u64 = 2;
const STREAM_DROPOUT: u64 = 3;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Trains from a fresh initialization. `on_record` sees every log record as
/// soon as it exists, so a diverged run still leaves its partial log.
pub fn train<F>(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    train_set: &[Utterance],
    valid_set: &[Utterance],
    mut on_record: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&LogRecord),
{
    model_cfg.validate()?;
    train_cfg.validate()?;
    if train_set.is_empty() {
        return Err(contract("empty training set"));
    }
    let mut init_rng = stream(train_cfg.seed, STREAM_INIT);
    let mut sched_rng = stream(train_cfg.seed, STREAM_SCHEDULE);
    let mut batch_rng = stream(train_cfg.seed, STREAM_BATCH);
    let mut drop_rng = stream(train_cfg.seed, STREAM_DROPOUT);

    let mut params: ParamSet<f64> = init_params(model_cfg, &mut init_rng);
    let mut adam = Adam::new(train_cfg.adam, &params);
    let opts = LossOptions {
        weights: train_cfg.weights,
        shift: train_cfg.s_shift,
    };

    let val_schedule = validation_schedule(train_cfg, model_cfg.audio_layers);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut cursor = order.len();
    let mut best: Vec<Checkpoint> = Vec::new();
    let mut last_finite: Vec<f64> = Vec::new();

    for step in 1..=train_cfg.steps {
        let lr = train_cfg.lr.at(step);
        let schedule = sample_schedule(train_cfg.sampler, model_cfg.audio_layers, &mut sched_rng);
        params.zero_grad();
        let weight = 1.0 / train_cfg.batch_size as f64;
        let mut sums = [0.0f64; 4];
        for _ in 0..train_cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut batch_rng);
                cursor = 0;
            }
            let utt = &train_set[order[cursor]];
            cursor += 1;
            let mut g = Graph::new();
            let b = params.bind(&mut g, true);
            let mut drop = Dropout::train(train_cfg.attn_dropout, &mut drop_rng);
            let (total, bundle): (_, LossBundle) = mode_pair_loss(
                &mut g,
                &b,
                model_cfg,
                &utt.features,
                &utt.tokens,
                &schedule,
                &opts,
                &mut drop,
            )?;
            g.backward(total)?;
            params.accumulate_grads(&g, &b, weight);
            for (s, v) in sums
                .iter_mut()
                .zip([bundle.l_stream, bundle.l_full, bundle.l_distill, bundle.total])
            {
                *s += v * weight;
            }
        }
        let finite = sums.iter().all(|v| v.is_finite())
            && params
                .iter()
                .all(|(_, t)| t.grad.as_ref().is_none_or(|g| g.iter().all(|v| v.is_finite())));
        if !finite {
            return Err(Error::Divergence { step, last_finite });
        }
        last_finite.push(sums[3]);
        if last_finite.len() > 5 {
            last_finite.remove(0);
        }
        adam.step(&mut params, lr);
        if !params.all_finite() {
            return Err(Error::Divergence { step, last_finite });
        }

        let mut record = LogRecord {
            step,
            l_stream: sums[0],
            l_full: sums[1],
            l_distill: sums[2],
            total: sums[3],
            schedule: schedule.encode(),
            lr,
            val_loss: None,
        };
        if step % train_cfg.eval_every == 0 || step == train_cfg.steps {
            let val = validation_loss(&params, model_cfg, valid_set, &val_schedule)?;
            record.val_loss = Some(val);
            let mut snapshot = params.clone();
            snapshot.zero_grad();
            snapshot.iter_mut().for_each(|(_, t)| t.grad = None);
            best.push(Checkpoint {
                step,
                val_loss: val,
                params: snapshot,
            });
            // stable: earlier checkpoints win ties
            best.sort_by(|a, b| a.val_loss.total_cmp(&b.val_loss));
            best.truncate(train_cfg.keep_best_k);
        }
        on_record(&record);
    }
    params.iter_mut().for_each(|(_, t)| t.grad = None);
    Ok(TrainOutcome { best, last: params })
}
