//! Phase 1: instruction-tuning on teacher demonstrations.
//!
//! The loss is the batch mean of the negative log-likelihood of the answer
//! tokens given the rendered prompt; prompt tokens are masked out.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{render_prompt, Demonstration};
use crate::error::{Error, Result};
use crate::policy::{continuation_weights, Checkpoint, CheckpointMeta, LanguageModel, Phase, Policy, PolicyModel, TokenId};
use crate::train::{clip_grad_norm, config_hash, AdamW, StepLog};

/// Which teacher answer the student is trained to reproduce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// Step-by-step prompt, teacher CoT answer.
    #[default]
    Cot,
    /// Standard prompt, plain teacher answer.
    Plain,
    /// Both examples for every demonstration.
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InstructConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub batch_size: usize,
    /// Global gradient-norm cap; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
    pub target_mode: TargetMode,
    pub seed: u64,
}

impl Default for InstructConfig {
    /// Desk-scale defaults.
    fn default() -> Self {
        InstructConfig {
            epochs: 4,
            learning_rate: 3e-3,
            weight_decay: 1e-4,
            warmup_ratio: 0.03,
            batch_size: 16,
            max_grad_norm: Some(1.0),
            target_mode: TargetMode::Cot,
            seed: 0,
        }
    }
}

impl InstructConfig {
    /// The published 7B-scale settings.
    pub fn paper() -> Self {
        InstructConfig {
            epochs: 4,
            learning_rate: 2e-5,
            weight_decay: 1e-4,
            warmup_ratio: 0.03,
            ..InstructConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config(format!("warmup_ratio {} outside [0, 1)", self.warmup_ratio)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        Ok(())
    }

    pub fn warmup_steps(&self, total_steps: usize) -> usize {
        (self.warmup_ratio * total_steps as f64).ceil() as usize
    }
}

/// Learning rate for optimizer step `step` (0-based) of `total_steps`:
/// linear warmup from 0 over `ceil(warmup_ratio * total)` steps, then cosine
/// decay to 0 at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, config: &InstructConfig) -> f64 {
    let lr = config.learning_rate;
    let warmup = config.warmup_steps(total_steps);
    if step < warmup {
        return lr * step as f64 / warmup as f64;
    }
    if total_steps <= warmup {
        return lr;
    }
    let progress = (step.min(total_steps) - warmup) as f64 / (total_steps - warmup) as f64;
    lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// A tokenized training example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub id: String,
    /// `<bos> prompt <sep>`.
    pub prompt: Vec<TokenId>,
    /// `answer <eos>`.
    pub answer: Vec<TokenId>,
}

/// Prompt/answer texts for a demonstration: `x_CoT` with the CoT answer, or
/// `x` with the plain answer.
pub fn example_text(demo: &Demonstration, cot: bool) -> (String, &str) {
    if cot {
        (render_prompt(demo, true), &demo.teacher_cot_answer)
    } else {
        (render_prompt(demo, false), &demo.teacher_answer)
    }
}

pub fn encode_example<P: Policy + ?Sized>(policy: &P, demo: &Demonstration, cot: bool) -> Result<Example> {
    let (prompt, answer) = example_text(demo, cot);
    let ex = Example {
        id: demo.id.clone(),
        prompt: policy.vocab().encode_prompt(&prompt),
        answer: policy.vocab().encode_answer(answer),
    };
    let len = ex.prompt.len() + ex.answer.len();
    if len > policy.context_length() {
        return Err(Error::ContextOverflow {
            len,
            limit: policy.context_length(),
            record: Some(ex.id),
        });
    }
    Ok(ex)
}

/// Expands demonstrations into examples according to `mode`.
pub fn encode_examples<P: Policy + ?Sized>(policy: &P, demos: &[Demonstration], mode: TargetMode) -> Result<Vec<Example>> {
    let mut out = Vec::with_capacity(demos.len());
    for d in demos {
        match mode {
            TargetMode::Cot => out.push(encode_example(policy, d, true)?),
            TargetMode::Plain => out.push(encode_example(policy, d, false)?),
            TargetMode::Mixed => {
                out.push(encode_example(policy, d, true)?);
                out.push(encode_example(policy, d, false)?);
            }
        }
    }
    Ok(out)
}

/// Mean over the batch of `-log p(answer | prompt)`.
pub fn example_loss<M: LanguageModel + ?Sized>(model: &M, batch: &[&Example]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Precondition("empty batch".into()));
    }
    let mut total = 0.0;
    for ex in batch {
        total -= model
            .sequence_log_prob(&ex.prompt, &ex.answer)
            .map_err(|e| name_record(e, &ex.id))?;
    }
    Ok(total / batch.len() as f64)
}

/// The instruction-tuning loss of a batch of demonstrations. `cot_target`
/// selects the CoT answer with the step-by-step prompt; otherwise the plain
/// answer with the standard prompt.
pub fn instruction_loss<P: Policy + ?Sized>(policy: &P, batch: &[&Demonstration], cot_target: bool) -> Result<f64> {
    let examples = batch
        .iter()
        .map(|d| encode_example(policy, d, cot_target))
        .collect::<Result<Vec<_>>>()?;
    example_loss(policy, &examples.iter().collect::<Vec<_>>())
}

/// Loss and its gradient (accumulated into `grad`) for a batch.
pub fn example_loss_grad(model: &PolicyModel, batch: &[&Example], grad: &mut [f64]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Precondition("empty batch".into()));
    }
    let scale = -1.0 / batch.len() as f64;
    let mut total = 0.0;
    for ex in batch {
        let (tokens, weights) = continuation_weights(&ex.prompt, &ex.answer);
        let lp = model
            .weighted_log_prob_grad(&tokens, &weights, scale, grad)
            .map_err(|e| name_record(e, &ex.id))?;
        total -= lp;
    }
    Ok(total / batch.len() as f64)
}

pub fn instruction_loss_grad(
    model: &PolicyModel,
    batch: &[&Demonstration],
    cot_target: bool,
    grad: &mut [f64],
) -> Result<f64> {
    let examples = batch
        .iter()
        .map(|d| encode_example(model, d, cot_target))
        .collect::<Result<Vec<_>>>()?;
    example_loss_grad(model, &examples.iter().collect::<Vec<_>>(), grad)
}

fn name_record(e: Error, id: &str) -> Error {
    match e {
        Error::ContextOverflow { len, limit, record: None } => Error::ContextOverflow {
            len,
            limit,
            record: Some(id.to_string()),
        },
        other => other,
    }
}

#[derive(Debug, Clone)]
pub struct InstructOutcome {
    pub policy: PolicyModel,
    pub log: Vec<StepLog>,
    pub checkpoint: Checkpoint,
}

/// Runs `epochs * ceil(N / batch_size)` AdamW steps over shuffled batches.
/// Deterministic in `config.seed`.
pub fn instruction_tune(policy: &PolicyModel, demos: &[Demonstration], config: &InstructConfig) -> Result<InstructOutcome> {
    config.validate()?;
    if demos.is_empty() {
        return Err(Error::Precondition("no demonstrations to tune on".into()));
    }
    let examples = encode_examples(policy, demos, config.target_mode)?;
    let per_epoch = examples.len().div_ceil(config.batch_size);
    let total = config.epochs * per_epoch;
    let hash = config_hash(config);
    let mut model = policy.clone();
    let mut opt = AdamW::new(model.param_count(), config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut grad = vec![0.0; model.param_count()];
    let mut log = Vec::with_capacity(total);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut step = 0;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            grad.fill(0.0);
            let loss = example_loss_grad(&model, &batch, &mut grad)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite {
                    step,
                    message: format!("instruction loss {loss}"),
                    last_good: Some(Box::new(snapshot(&model, step, &hash))),
                });
            }
            if let Some(max) = config.max_grad_norm {
                clip_grad_norm(&mut grad, max);
            }
            let lr = lr_at(step, total, config);
            opt.step(model.params_mut(), &grad, lr);
            step += 1;
            log.push(StepLog {
                step,
                lr,
                loss,
                val_loss: None,
            });
            if step % 50 == 0 {
                log::debug!("instruct step {step}/{total} loss {loss:.4}");
            }
        }
    }
    let checkpoint = snapshot(&model, step, &hash);
    Ok(InstructOutcome {
        policy: model,
        log,
        checkpoint,
    })
}

fn snapshot(model: &PolicyModel, step: usize, hash: &str) -> Checkpoint {
    Checkpoint::capture(
        model,
        CheckpointMeta {
            phase: Phase::Instructed,
            step,
            val_loss: None,
            config_hash: hash.to_string(),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> InstructConfig {
        InstructConfig {
            learning_rate: 1.0,
            warmup_ratio: 0.1,
            ..InstructConfig::default()
        }
    }

    #[test]
    fn warmup_end_hits_peak() {
        let c = cfg();
        assert_eq!(c.warmup_steps(100), 10);
        assert_eq!(lr_at(10, 100, &c), 1.0);
        assert!(lr_at(5, 100, &c) < 1.0);
        assert_eq!(lr_at(0, 100, &c), 0.0);
    }

    #[test]
    fn cosine_endpoint_and_midpoint() {
        let c = cfg();
        assert!(lr_at(100, 100, &c).abs() < 1e-12);
        // decay spans steps 10..100, midpoint 55
        assert!((lr_at(55, 100, &c) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn warmup_uses_ceiling() {
        let c = InstructConfig {
            warmup_ratio: 0.03,
            ..cfg()
        };
        assert_eq!(c.warmup_steps(500), 15);
        assert_eq!(c.warmup_steps(10), 1);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(InstructConfig { warmup_ratio: 1.0, ..cfg() }.validate().is_err());
        assert!(InstructConfig { learning_rate: 0.0, ..cfg() }.validate().is_err());
        assert!(InstructConfig { batch_size: 0, ..cfg() }.validate().is_err());
    }
}
