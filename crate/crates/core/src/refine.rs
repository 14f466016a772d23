//! Phase 2: self-refinement with Direct Preference Optimization.
//!
//! The instructed policy answers every demonstration twice (standard and
//! step-by-step prompt). Those samples, with the teacher answers as fallback,
//! become preference pairs, and a copy of the policy is trained to prefer
//! the chosen answer relative to the frozen instructed reference.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::answer::target_in;
use crate::corpus::{render_prompt, write_jsonl, Demonstration};
use crate::error::{Error, Result};
use crate::policy::{
    continuation_weights, generate, Checkpoint, CheckpointMeta, GenerationConfig, LanguageModel, Phase, Policy,
    PolicyModel, TokenId,
};
use crate::teacher::parallel_map;
use crate::train::{clip_grad_norm, config_hash, derive_seed, sigmoid, softplus, AdamW, StepLog};

/// Pair-construction rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Step-by-step answers preferred over plain ones.
    #[default]
    Cot,
    /// Plain answers preferred over step-by-step ones.
    Answer,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cot" => Ok(Variant::Cot),
            "answer" => Ok(Variant::Answer),
            other => Err(Error::Config(format!("unknown variant `{other}` (expected cot or answer)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// The student's own step-by-step sample.
    SelfCot,
    /// The student's own plain sample (answer variant).
    SelfAnswer,
    /// The teacher's demonstration answer.
    TeacherDemo,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub demo_id: String,
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub chosen_provenance: Provenance,
    /// The rejected answer also contains the target; kept, but worth
    /// looking at.
    #[serde(default)]
    pub rejected_correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    pub beta: f64,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub max_steps: usize,
    /// Responses sampled per demonstration (`k`).
    pub samples_per_demo: usize,
    pub sample_temperature: f64,
    pub max_new_tokens: usize,
    pub variant: Variant,
    /// Share of pairs held out for checkpoint selection.
    pub validation_fraction: f64,
    /// Validation loss is measured every this many steps (and at the end).
    pub eval_every: usize,
    pub weight_decay: f64,
    pub max_grad_norm: Option<f64>,
    pub seed: u64,
}

impl Default for RefineConfig {
    /// Desk-scale defaults.
    fn default() -> Self {
        RefineConfig {
            beta: 0.1,
            learning_rate: 1e-4,
            warmup_steps: 10,
            batch_size: 16,
            max_steps: 200,
            samples_per_demo: 1,
            sample_temperature: 0.1,
            max_new_tokens: 64,
            variant: Variant::Cot,
            validation_fraction: 0.1,
            eval_every: 20,
            weight_decay: 0.0,
            max_grad_norm: Some(1.0),
            seed: 0,
        }
    }
}

impl RefineConfig {
    /// The published 7B-scale settings.
    pub fn paper() -> Self {
        RefineConfig {
            beta: 0.1,
            learning_rate: 1e-6,
            warmup_steps: 100,
            batch_size: 128,
            max_steps: 1000,
            eval_every: 50,
            ..RefineConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.samples_per_demo == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size, samples_per_demo and eval_every must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("validation_fraction outside [0, 1)".into()));
        }
        if self.sample_temperature < 0.0 {
            return Err(Error::Config("sample_temperature must be non-negative".into()));
        }
        Ok(())
    }

    /// Learning rate at optimizer step `step` (0-based): linear warmup, then
    /// constant.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            self.learning_rate * step as f64 / self.warmup_steps as f64
        } else {
            self.learning_rate
        }
    }
}

// ---------------------------------------------------------------------------
// Sampling

/// The instructed policy's answers to one demonstration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampledResponses {
    pub demo_id: String,
    pub sample_index: usize,
    /// Answer to the standard prompt `x`.
    pub y: String,
    /// Answer to the step-by-step prompt `x_CoT`.
    pub y_cot: String,
}

/// Samples `y = pi(x)` and `y_cot = pi(x_CoT)` with seeds derived from the
/// config seed, the demo id, and `sample_index`.
pub fn sample_responses<P: Policy + ?Sized>(
    policy: &P,
    demo: &Demonstration,
    config: &RefineConfig,
    sample_index: usize,
) -> Result<SampledResponses> {
    let base = derive_seed(config.seed, &format!("sample/{}/{sample_index}", demo.id));
    let gen = |cot: bool, label: &str| {
        generate(
            policy,
            &render_prompt(demo, cot),
            &GenerationConfig {
                temperature: config.sample_temperature,
                max_new_tokens: config.max_new_tokens,
                seed: derive_seed(base, label),
            },
        )
        .map_err(|e| match e {
            Error::ContextOverflow { len, limit, .. } => Error::ContextOverflow {
                len,
                limit,
                record: Some(demo.id.clone()),
            },
            other => other,
        })
    };
    Ok(SampledResponses {
        demo_id: demo.id.clone(),
        sample_index,
        y: gen(false, "plain")?,
        y_cot: gen(true, "cot")?,
    })
}

/// `samples_per_demo` samples for every demo, in demo order.
pub fn sample_all<P: Policy + Sync + ?Sized>(
    policy: &P,
    demos: &[Demonstration],
    config: &RefineConfig,
    workers: usize,
) -> Result<Vec<SampledResponses>> {
    let jobs: Vec<(usize, usize)> = (0..demos.len())
        .flat_map(|d| (0..config.samples_per_demo).map(move |k| (d, k)))
        .collect();
    parallel_map(&jobs, workers, |&(d, k)| sample_responses(policy, &demos[d], config, k))
        .into_iter()
        .collect()
}

// ---------------------------------------------------------------------------
// Pairs

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairSet {
    pub pairs: Vec<PreferencePair>,
    /// Samples whose chosen and rejected answers coincided.
    pub dropped: usize,
}

impl PairSet {
    pub fn rejected_correct(&self) -> usize {
        self.pairs.iter().filter(|p| p.rejected_correct).count()
    }
}

fn align<'a>(demos: &'a [Demonstration], samples: &[SampledResponses]) -> Result<Vec<&'a Demonstration>> {
    let index: std::collections::HashMap<&str, &Demonstration> = demos.iter().map(|d| (d.id.as_str(), d)).collect();
    samples
        .iter()
        .map(|s| {
            index
                .get(s.demo_id.as_str())
                .copied()
                .ok_or_else(|| Error::Alignment(format!("sample for unknown demonstration `{}`", s.demo_id)))
        })
        .collect()
}

/// Step-by-step preferred: prompt `x_CoT`; chosen is the student's CoT
/// sample when it contains the target, else the teacher CoT answer; rejected
/// is always the plain sample.
pub fn build_pairs_cot(demos: &[Demonstration], samples: &[SampledResponses]) -> Result<PairSet> {
    let aligned = align(demos, samples)?;
    let mut set = PairSet::default();
    for (demo, s) in aligned.into_iter().zip(samples) {
        let (chosen, provenance) = if target_in(&s.y_cot, &demo.target) {
            (s.y_cot.clone(), Provenance::SelfCot)
        } else {
            (demo.teacher_cot_answer.clone(), Provenance::TeacherDemo)
        };
        push_pair(&mut set, demo, render_prompt(demo, true), chosen, s.y.clone(), provenance);
    }
    Ok(set)
}

/// Plain answers preferred: prompt `x`; chosen is the student's plain sample
/// when it contains the target, else the teacher plain answer; rejected is
/// always the CoT sample.
pub fn build_pairs_answer(demos: &[Demonstration], samples: &[SampledResponses]) -> Result<PairSet> {
    let aligned = align(demos, samples)?;
    let mut set = PairSet::default();
    for (demo, s) in aligned.into_iter().zip(samples) {
        let (chosen, provenance) = if target_in(&s.y, &demo.target) {
            (s.y.clone(), Provenance::SelfAnswer)
        } else {
            (demo.teacher_answer.clone(), Provenance::TeacherDemo)
        };
        push_pair(&mut set, demo, render_prompt(demo, false), chosen, s.y_cot.clone(), provenance);
    }
    Ok(set)
}

pub fn build_pairs(variant: Variant, demos: &[Demonstration], samples: &[SampledResponses]) -> Result<PairSet> {
    match variant {
        Variant::Cot => build_pairs_cot(demos, samples),
        Variant::Answer => build_pairs_answer(demos, samples),
    }
}

fn push_pair(
    set: &mut PairSet,
    demo: &Demonstration,
    prompt: String,
    chosen: String,
    rejected: String,
    provenance: Provenance,
) {
    if chosen == rejected {
        set.dropped += 1;
        return;
    }
    let rejected_correct = target_in(&rejected, &demo.target);
    set.pairs.push(PreferencePair {
        demo_id: demo.id.clone(),
        prompt,
        chosen,
        rejected,
        chosen_provenance: provenance,
        rejected_correct,
    });
}

pub fn save_pairs(pairs: &[PreferencePair], path: &Path) -> Result<()> {
    write_jsonl(pairs, path)
}

pub fn parse_pairs(reader: impl std::io::BufRead) -> Result<Vec<PreferencePair>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::parse(format!("line {}", i + 1), e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: PreferencePair =
            serde_json::from_str(&line).map_err(|e| Error::parse(format!("line {}", i + 1), e.to_string()))?;
        if pair.chosen == pair.rejected {
            return Err(Error::parse(format!("line {}", i + 1), "chosen equals rejected"));
        }
        out.push(pair);
    }
    Ok(out)
}

pub fn load_pairs(path: &Path) -> Result<Vec<PreferencePair>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_pairs(std::io::BufReader::new(file))
}

// ---------------------------------------------------------------------------
// Objective

/// The four sequence log-probabilities behind one margin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairLogProbs {
    pub policy_chosen: f64,
    pub policy_rejected: f64,
    pub ref_chosen: f64,
    pub ref_rejected: f64,
}

impl PairLogProbs {
    /// `beta * [(pi_c - ref_c) - (pi_r - ref_r)]`.
    pub fn margin(&self, beta: f64) -> f64 {
        beta * (self.policy_chosen - self.ref_chosen) - beta * (self.policy_rejected - self.ref_rejected)
    }
}

/// `-log sigmoid(margin)`.
pub fn dpo_loss_from_margin(margin: f64) -> f64 {
    softplus(-margin)
}

/// A pair tokenized for a particular vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedPair {
    pub demo_id: String,
    pub prompt: Vec<TokenId>,
    pub chosen: Vec<TokenId>,
    pub rejected: Vec<TokenId>,
}

pub fn encode_pair<P: Policy + ?Sized>(policy: &P, pair: &PreferencePair) -> Result<EncodedPair> {
    let v = policy.vocab();
    let enc = EncodedPair {
        demo_id: pair.demo_id.clone(),
        prompt: v.encode_prompt(&pair.prompt),
        chosen: v.encode_answer(&pair.chosen),
        rejected: v.encode_answer(&pair.rejected),
    };
    let len = enc.prompt.len() + enc.chosen.len().max(enc.rejected.len());
    if len > policy.context_length() {
        return Err(Error::ContextOverflow {
            len,
            limit: policy.context_length(),
            record: Some(pair.demo_id.clone()),
        });
    }
    Ok(enc)
}

fn pair_log_probs<M: LanguageModel + ?Sized>(model: &M, pair: &EncodedPair) -> Result<(f64, f64)> {
    Ok((
        model.sequence_log_prob(&pair.prompt, &pair.chosen)?,
        model.sequence_log_prob(&pair.prompt, &pair.rejected)?,
    ))
}

/// The DPO margin of `pair` from four sequence log-probabilities.
pub fn dpo_margin<M: LanguageModel + ?Sized, R: LanguageModel + ?Sized>(
    policy: &M,
    reference: &R,
    pair: &EncodedPair,
    beta: f64,
) -> Result<f64> {
    let (pc, pr) = pair_log_probs(policy, pair)?;
    let (rc, rr) = pair_log_probs(reference, pair)?;
    Ok(PairLogProbs {
        policy_chosen: pc,
        policy_rejected: pr,
        ref_chosen: rc,
        ref_rejected: rr,
    }
    .margin(beta))
}

/// Batch mean of `-log sigmoid(margin)`.
pub fn dpo_loss<M: LanguageModel + ?Sized, R: LanguageModel + ?Sized>(
    policy: &M,
    reference: &R,
    batch: &[EncodedPair],
    beta: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Precondition("empty preference batch".into()));
    }
    let mut total = 0.0;
    for pair in batch {
        total += dpo_loss_from_margin(dpo_margin(policy, reference, pair, beta)?);
    }
    Ok(total / batch.len() as f64)
}

/// Reference log-probabilities, computed once per pair; the reference is a
/// constant of the objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceLogProbs {
    pub chosen: f64,
    pub rejected: f64,
}

pub fn reference_log_probs<R: LanguageModel + ?Sized>(reference: &R, pair: &EncodedPair) -> Result<ReferenceLogProbs> {
    let (chosen, rejected) = pair_log_probs(reference, pair)?;
    Ok(ReferenceLogProbs { chosen, rejected })
}

/// DPO loss over `batch` and its gradient with respect to the policy
/// parameters, accumulated into `grad`. Per pair,
/// `dL/dlog pi(y_w) = -beta * sigmoid(-M) / B` and
/// `dL/dlog pi(y_l) = +beta * sigmoid(-M) / B`.
pub fn dpo_loss_grad(
    policy: &PolicyModel,
    batch: &[(&EncodedPair, ReferenceLogProbs)],
    beta: f64,
    grad: &mut [f64],
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Precondition("empty preference batch".into()));
    }
    let n = policy.param_count();
    let mut g_chosen = vec![0.0; n];
    let mut g_rejected = vec![0.0; n];
    let b = batch.len() as f64;
    let mut total = 0.0;
    for (pair, reference) in batch {
        g_chosen.fill(0.0);
        g_rejected.fill(0.0);
        let (ct, cw) = continuation_weights(&pair.prompt, &pair.chosen);
        let (rt, rw) = continuation_weights(&pair.prompt, &pair.rejected);
        let pc = policy.weighted_log_prob_grad(&ct, &cw, 1.0, &mut g_chosen)?;
        let pr = policy.weighted_log_prob_grad(&rt, &rw, 1.0, &mut g_rejected)?;
        let lp = PairLogProbs {
            policy_chosen: pc,
            policy_rejected: pr,
            ref_chosen: reference.chosen,
            ref_rejected: reference.rejected,
        };
        let m = lp.margin(beta);
        total += dpo_loss_from_margin(m);
        let s = beta * sigmoid(-m) / b;
        for i in 0..n {
            grad[i] += s * (g_rejected[i] - g_chosen[i]);
        }
    }
    Ok(total / b)
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone)]
pub struct RefineOutcome {
    /// Parameters at the selected step.
    pub policy: PolicyModel,
    pub checkpoint: Checkpoint,
    pub log: Vec<StepLog>,
    pub selected_step: usize,
    /// Validation loss before the first step (`ln 2`: policy equals reference).
    pub initial_val_loss: f64,
    pub pairs: PairSet,
    pub train_pairs: usize,
    pub validation_pairs: usize,
}

/// Samples from `instructed`, builds pairs with `config.variant`, and runs
/// [`train_on_pairs`].
pub fn self_refine(instructed: &PolicyModel, demos: &[Demonstration], config: &RefineConfig) -> Result<RefineOutcome> {
    config.validate()?;
    let samples = sample_all(instructed, demos, config, 1)?;
    let pairs = build_pairs(config.variant, demos, &samples)?;
    log::info!(
        "{} pairs ({} dropped, {} with a correct rejected answer)",
        pairs.pairs.len(),
        pairs.dropped,
        pairs.rejected_correct()
    );
    train_on_pairs(instructed, pairs, config)
}

/// DPO against a frozen copy of `instructed`, which also initializes the
/// trained policy. The last `validation_fraction` of the shuffled pairs is
/// held out; the step with the lowest validation loss (earliest on ties,
/// step 0 included) is returned.
pub fn train_on_pairs(instructed: &PolicyModel, pairs: PairSet, config: &RefineConfig) -> Result<RefineOutcome> {
    config.validate()?;
    if pairs.pairs.is_empty() {
        return Err(Error::NoPairs(format!(
            "all {} samples produced identical chosen and rejected answers",
            pairs.dropped
        )));
    }
    let hash = config_hash(config);
    let reference = instructed;
    let mut encoded = Vec::with_capacity(pairs.pairs.len());
    for p in &pairs.pairs {
        let e = encode_pair(reference, p)?;
        let r = reference_log_probs(reference, &e)?;
        encoded.push((e, r));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "pairs"));
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    order.shuffle(&mut rng);
    let n_val = validation_count(encoded.len(), config.validation_fraction);
    let (train_idx, val_idx) = order.split_at(encoded.len() - n_val);
    let val_idx: Vec<usize> = if val_idx.is_empty() { train_idx.to_vec() } else { val_idx.to_vec() };
    let mut train_idx = train_idx.to_vec();

    let validation = |model: &PolicyModel| -> Result<f64> {
        let mut total = 0.0;
        for &i in &val_idx {
            let (pair, r) = &encoded[i];
            let (pc, pr) = pair_log_probs(model, pair)?;
            let lp = PairLogProbs {
                policy_chosen: pc,
                policy_rejected: pr,
                ref_chosen: r.chosen,
                ref_rejected: r.rejected,
            };
            total += dpo_loss_from_margin(lp.margin(config.beta));
        }
        Ok(total / val_idx.len() as f64)
    };

    let mut model = instructed.clone();
    let initial_val = validation(&model)?;
    let mut best = (initial_val, 0usize, model.clone());
    let mut log = Vec::with_capacity(config.max_steps);
    let mut opt = AdamW::new(model.param_count(), config.weight_decay);
    let mut grad = vec![0.0; model.param_count()];
    let mut cursor = train_idx.len();
    for step in 0..config.max_steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size.min(train_idx.len()) {
            if cursor == train_idx.len() {
                train_idx.shuffle(&mut rng);
                cursor = 0;
            }
            let (p, r) = &encoded[train_idx[cursor]];
            batch.push((p, *r));
            cursor += 1;
        }
        grad.fill(0.0);
        let loss = dpo_loss_grad(&model, &batch, config.beta, &mut grad)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                step,
                message: format!("DPO loss {loss}"),
                last_good: Some(Box::new(snapshot(&best.2, best.1, Some(best.0), &hash))),
            });
        }
        if let Some(max) = config.max_grad_norm {
            clip_grad_norm(&mut grad, max);
        }
        let lr = config.lr_at(step);
        opt.step(model.params_mut(), &grad, lr);
        let done = step + 1;
        let val_loss = if done % config.eval_every == 0 || done == config.max_steps {
            let v = validation(&model)?;
            if v < best.0 {
                best = (v, done, model.clone());
            }
            Some(v)
        } else {
            None
        };
        log.push(StepLog {
            step: done,
            lr,
            loss,
            val_loss,
        });
    }
    let (val, selected_step, policy) = best;
    let checkpoint = snapshot(&policy, selected_step, Some(val), &hash);
    Ok(RefineOutcome {
        policy,
        checkpoint,
        log,
        selected_step,
        initial_val_loss: initial_val,
        train_pairs: encoded.len() - n_val,
        validation_pairs: n_val,
        pairs,
    })
}

/// Held-out count: `round(fraction * n)`, at least one when `n >= 2` and the
/// fraction is positive, never all pairs.
fn validation_count(n: usize, fraction: f64) -> usize {
    if n < 2 || fraction <= 0.0 {
        return 0;
    }
    ((fraction * n as f64).round() as usize).clamp(1, n - 1)
}

fn snapshot(model: &PolicyModel, step: usize, val_loss: Option<f64>, hash: &str) -> Checkpoint {
    Checkpoint::capture(
        model,
        CheckpointMeta {
            phase: Phase::Refined,
            step,
            val_loss,
            config_hash: hash.to_string(),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn margin_by_substitution() {
        let lp = PairLogProbs {
            policy_chosen: -2.0,
            policy_rejected: -5.0,
            ref_chosen: -3.0,
            ref_rejected: -4.0,
        };
        assert!((lp.margin(0.1) - 0.2).abs() < 1e-12);
        assert!((lp.margin(0.2) - 2.0 * lp.margin(0.1)).abs() < 1e-12);
    }

    #[test]
    fn loss_at_zero_margin_is_ln2() {
        assert!((dpo_loss_from_margin(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn loss_limits() {
        assert!(dpo_loss_from_margin(1e3) < 1e-300);
        assert!(dpo_loss_from_margin(-1e3) >= 999.0);
    }

    #[test]
    fn paper_preset_warmup_spans_100_steps() {
        let c = RefineConfig::paper();
        assert_eq!(c.lr_at(100), 1e-6);
        assert!(c.lr_at(99) < 1e-6);
        assert_eq!(c.lr_at(999), 1e-6);
        assert_eq!(c.lr_at(0), 0.0);
    }

    #[test]
    fn validation_split_sizes() {
        assert_eq!(validation_count(500, 0.1), 50);
        assert_eq!(validation_count(3, 0.1), 1);
        assert_eq!(validation_count(1, 0.1), 0);
        assert_eq!(validation_count(10, 0.0), 0);
    }

    #[test]
    fn variant_parses() {
        assert_eq!("answer".parse::<Variant>().unwrap(), Variant::Answer);
        assert!("both".parse::<Variant>().is_err());
    }
}
