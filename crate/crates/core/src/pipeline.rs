//! End-to-end runs: the run configuration, named seed derivation, the
//! format-pretrained base policy, and the stage functions shared by the
//! command line and the experiments.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    gen_synthetic_tasks, lexicon, make_splits, render_prompt, select, skeletons, DatasetSplit, Demonstration,
    Fraction, TaskItem, TaskSpec, Theme,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, Evaluation, PromptKind};
use crate::instruct::{instruction_tune, InstructConfig, TargetMode};
use crate::policy::{Arch, Checkpoint, CheckpointMeta, GenerationConfig, Phase, PolicyModel, Vocabulary};
use crate::policy::vocab::MAX_VOCAB;
use crate::refine::{self_refine, RefineConfig, RefineOutcome};
use crate::teacher::{build_demonstrations, BuildOptions, ChatClient, ExternalConfig, ExternalTeacher, OracleTeacher, Quarantined, TeacherKind};
use crate::train::{config_hash, derive_seed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub tasks: Vec<TaskSpec>,
    /// Items per task in the training corpus (before annotation).
    pub train_size: usize,
    /// Held-out items per task, disjoint from training.
    pub test_size: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            tasks: vec![TaskSpec::multiple_choice("objects", 4, Theme::Category)],
            train_size: 2000,
            test_size: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub kind: TeacherKind,
    pub external: ExternalConfig,
    pub max_reject_rate: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            kind: TeacherKind::Oracle,
            external: ExternalConfig::default(),
            max_reject_rate: 0.2,
        }
    }
}

/// Format pretraining of the base policy on demonstrations whose rationales
/// and answers are scrambled: the model learns the answer layout but not
/// the task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 1,
            learning_rate: 3e-3,
            batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub arch: Arch,
    pub max_vocab: usize,
    pub pretrain: PretrainConfig,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            arch: Arch {
                layers: 2,
                width: 32,
                heads: 4,
                context_length: 96,
                mlp_hidden: Some(64),
            },
            max_vocab: 256,
            pretrain: PretrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// 0 decodes greedily.
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub workers: usize,
    /// Global seeds for multi-seed tables.
    pub seeds: Vec<u64>,
    pub fractions: Vec<Fraction>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            temperature: 0.0,
            max_new_tokens: 48,
            workers: 1,
            seeds: vec![0, 1, 2, 3, 4],
            fractions: Fraction::ALL.to_vec(),
        }
    }
}

/// Everything a run needs. Stage seeds are derived from `seed`; the `seed`
/// fields inside `instruct` and `refine` are overwritten per stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub run_id: String,
    pub corpus: CorpusConfig,
    pub teacher: TeacherConfig,
    pub policy: PolicyConfig,
    pub instruct: InstructConfig,
    pub refine: RefineConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            run_id: "toy".into(),
            corpus: CorpusConfig::default(),
            teacher: TeacherConfig::default(),
            policy: PolicyConfig::default(),
            instruct: toy_instruct(),
            refine: toy_refine(),
            eval: EvalConfig::default(),
        }
    }
}

/// Instruction-tuning for the bundled toy task. One epoch sits where the
/// task only starts to be learned and varies widely across seeds; two are
/// reliable on the full split while the small fractions keep headroom.
/// Training on plain answers too keeps `y = π(x)` a plain answer, so
/// CoT-vs-plain preference pairs do not collapse.
pub fn toy_instruct() -> InstructConfig {
    InstructConfig {
        epochs: 2,
        batch_size: 8,
        target_mode: TargetMode::Mixed,
        ..InstructConfig::default()
    }
}

/// Self-refinement for the bundled toy task. With `beta = 0.1` the pairs
/// separate on their first token within a few steps and the sigmoid weight
/// starves every other signal; a smaller beta keeps them learning.
pub fn toy_refine() -> RefineConfig {
    RefineConfig {
        beta: 0.01,
        learning_rate: 3e-3,
        max_steps: 300,
        max_new_tokens: 64,
        ..RefineConfig::default()
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.corpus.tasks.is_empty() {
            return Err(Error::Config("corpus.tasks is empty".into()));
        }
        let mut ids = std::collections::HashSet::new();
        for t in &self.corpus.tasks {
            t.validate()?;
            if !ids.insert(&t.task_id) {
                return Err(Error::Config(format!("duplicate task id `{}`", t.task_id)));
            }
        }
        if self.corpus.train_size == 0 || self.corpus.test_size == 0 {
            return Err(Error::Config("corpus sizes must be positive".into()));
        }
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) || self.run_id.starts_with('.') {
            return Err(Error::Config(format!("run_id `{}` is not a plain directory name", self.run_id)));
        }
        self.policy.arch.validate()?;
        if self.policy.max_vocab > MAX_VOCAB {
            return Err(Error::Config(format!("policy.max_vocab exceeds {MAX_VOCAB}")));
        }
        self.instruct.validate()?;
        self.refine.validate()?;
        if self.eval.seeds.is_empty() {
            return Err(Error::Config("eval.seeds is empty".into()));
        }
        Ok(())
    }

    pub fn task(&self, task_id: &str) -> Result<&TaskSpec> {
        self.corpus
            .tasks
            .iter()
            .find(|t| t.task_id == task_id)
            .ok_or_else(|| Error::Config(format!("unknown task `{task_id}`")))
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }

    pub fn generation(&self, seed: u64) -> GenerationConfig {
        GenerationConfig {
            temperature: self.eval.temperature,
            max_new_tokens: self.eval.max_new_tokens,
            seed,
        }
    }
}

/// Named sub-seeds of a global seed.
pub mod seeds {
    use super::*;

    pub fn data(global: u64, task: &str) -> u64 {
        derive_seed(global, &format!("data/{task}"))
    }

    pub fn splits(global: u64, task: &str) -> u64 {
        derive_seed(global, &format!("splits/{task}"))
    }

    pub fn base(global: u64) -> u64 {
        derive_seed(global, "base")
    }

    pub fn instruct(global: u64, task: &str, fraction: Fraction) -> u64 {
        derive_seed(global, &format!("instruct/{task}/{fraction}"))
    }

    /// `source` is the policy being refined (`base` or the instructed task).
    pub fn refine(global: u64, source: &str, task: &str, fraction: Fraction) -> u64 {
        derive_seed(global, &format!("refine/{source}/{task}/{fraction}"))
    }

    pub fn eval(global: u64, task: &str) -> u64 {
        derive_seed(global, &format!("eval/{task}"))
    }
}

// ---------------------------------------------------------------------------
// Data

/// An annotated task: training corpus, held-out test demonstrations and the
/// nested low-resource splits of the training corpus.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub train: Vec<Demonstration>,
    pub test: Vec<Demonstration>,
    pub splits: BTreeMap<Fraction, DatasetSplit>,
    pub quarantined: Vec<Quarantined>,
}

impl TaskData {
    /// Training demonstrations in the split for `fraction`.
    pub fn train_at(&self, fraction: Fraction) -> Vec<Demonstration> {
        match self.splits.get(&fraction) {
            Some(split) => select(&self.train, split).into_iter().cloned().collect(),
            None => Vec::new(),
        }
    }
}

/// Generates the raw train and test items of one task, train first.
pub fn generate_items(cfg: &RunConfig, spec: &TaskSpec, global_seed: u64) -> Result<Vec<TaskItem>> {
    let n = cfg.corpus.train_size + cfg.corpus.test_size;
    gen_synthetic_tasks(spec, n, seeds::data(global_seed, &spec.task_id))
}

/// Annotates and splits generated items. Test items are annotated by the
/// oracle whatever the configured teacher, since only their targets are
/// scored.
pub fn annotate_items(
    cfg: &RunConfig,
    spec: &TaskSpec,
    items: &[TaskItem],
    global_seed: u64,
    reject_path: Option<PathBuf>,
) -> Result<TaskData> {
    if items.len() != cfg.corpus.train_size + cfg.corpus.test_size {
        return Err(Error::Alignment(format!(
            "{} items for task `{}`, expected {} train + {} test",
            items.len(),
            spec.task_id,
            cfg.corpus.train_size,
            cfg.corpus.test_size
        )));
    }
    let all = skeletons(spec, items);
    let (train_sk, test_sk) = all.split_at(cfg.corpus.train_size);
    let options = BuildOptions {
        concurrency: cfg.teacher.external.concurrency.max(1),
        reject_path,
        max_reject_rate: cfg.teacher.max_reject_rate,
    };
    let built = match cfg.teacher.kind {
        TeacherKind::Oracle => build_demonstrations(train_sk, &OracleTeacher, &BuildOptions { concurrency: 1, ..options })?,
        TeacherKind::External => {
            let teacher = ExternalTeacher::new(ChatClient::new(cfg.teacher.external.clone())?);
            build_demonstrations(train_sk, &teacher, &options)?
        }
    };
    let test = build_demonstrations(test_sk, &OracleTeacher, &BuildOptions::default())?.demonstrations;
    let splits = make_splits(&built.demonstrations, seeds::splits(global_seed, &spec.task_id));
    Ok(TaskData {
        spec: spec.clone(),
        train: built.demonstrations,
        test,
        splits,
        quarantined: built.quarantined,
    })
}

/// Generates, annotates and splits one task.
pub fn prepare_task(cfg: &RunConfig, spec: &TaskSpec, global_seed: u64, reject_path: Option<PathBuf>) -> Result<TaskData> {
    let items = generate_items(cfg, spec, global_seed)?;
    annotate_items(cfg, spec, &items, global_seed, reject_path)
}

/// Every prompt/answer text the policy is trained on.
pub fn vocabulary_for(tasks: &[TaskData], max_size: usize) -> Result<Vocabulary> {
    let mut texts = Vec::new();
    for t in tasks {
        for d in &t.train {
            texts.push(render_prompt(d, true));
            texts.push(d.teacher_answer.clone());
            texts.push(d.teacher_cot_answer.clone());
        }
    }
    Vocabulary::build(texts.iter().map(String::as_str), max_size)
}

/// Copies of `demos` whose answers keep the teacher's layout but carry no
/// task signal: multiple-choice rationales describe each option with a
/// random category and conclude on a random label; numeric steps keep their
/// shape with random values.
pub fn scramble(demos: &[Demonstration], seed: u64) -> Vec<Demonstration> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let descriptions: Vec<&str> = lexicon::CATEGORIES
        .iter()
        .chain(lexicon::PROPERTIES)
        .map(|g| g.describe)
        .collect();
    demos
        .iter()
        .map(|d| {
            let mut out = d.clone();
            match &d.choices {
                Some(choices) => {
                    let pick = choices.choose(&mut rng).expect("choices");
                    let mut lines: Vec<String> = choices
                        .iter()
                        .map(|c| {
                            let verdict = if c.label == pick.label { "yes" } else { "no" };
                            let d = descriptions.choose(&mut rng).expect("groups");
                            format!("{}) {}: {d}, {verdict}", c.label, c.text)
                        })
                        .collect();
                    lines.push(format!("So the answer is {}) {}.", pick.label, pick.text));
                    out.target = pick.label.clone();
                    out.teacher_answer = pick.label.clone();
                    out.teacher_cot_answer = lines.join("\n");
                }
                None => {
                    let value: i64 = rng.gen_range(2..100);
                    let lines: Vec<String> = d
                        .teacher_cot_answer
                        .lines()
                        .map(|l| l.chars().map(|c| scramble_digit(c, &mut rng)).collect())
                        .collect();
                    let mut lines = lines;
                    if let Some(last) = lines.last_mut() {
                        *last = format!("The answer is {value}.");
                    }
                    out.target = value.to_string();
                    out.teacher_answer = value.to_string();
                    out.teacher_cot_answer = lines.join("\n");
                }
            }
            out
        })
        .collect()
}

fn scramble_digit(c: char, rng: &mut ChaCha8Rng) -> char {
    if c.is_ascii_digit() {
        char::from(b'0' + rng.gen_range(0..10u8))
    } else {
        c
    }
}

/// A freshly initialized policy, format-pretrained on scrambled copies of
/// the training corpora.
pub fn base_policy(cfg: &RunConfig, tasks: &[TaskData], global_seed: u64) -> Result<PolicyModel> {
    let vocab = vocabulary_for(tasks, cfg.policy.max_vocab)?;
    let seed = seeds::base(global_seed);
    let model = PolicyModel::init(cfg.policy.arch.clone(), vocab, derive_seed(seed, "init"))?;
    let pre = &cfg.policy.pretrain;
    if pre.epochs == 0 {
        return Ok(model);
    }
    let demos: Vec<Demonstration> = tasks.iter().flat_map(|t| t.train.iter().cloned()).collect();
    let scrambled = scramble(&demos, derive_seed(seed, "scramble"));
    let tune = InstructConfig {
        epochs: pre.epochs,
        learning_rate: pre.learning_rate,
        batch_size: pre.batch_size,
        target_mode: TargetMode::Mixed,
        seed: derive_seed(seed, "pretrain"),
        ..InstructConfig::default()
    };
    Ok(instruction_tune(&model, &scrambled, &tune)?.policy)
}

pub fn base_checkpoint(model: &PolicyModel, cfg: &RunConfig) -> Checkpoint {
    Checkpoint::capture(
        model,
        CheckpointMeta {
            phase: Phase::Base,
            step: 0,
            val_loss: None,
            config_hash: config_hash(&(&cfg.policy, &cfg.corpus, cfg.seed)),
        },
    )
}

pub fn tune(cfg: &RunConfig, base: &PolicyModel, data: &TaskData, fraction: Fraction, global_seed: u64) -> Result<crate::instruct::InstructOutcome> {
    let demos = data.train_at(fraction);
    let icfg = InstructConfig {
        seed: seeds::instruct(global_seed, &data.spec.task_id, fraction),
        ..cfg.instruct.clone()
    };
    instruction_tune(base, &demos, &icfg)
}

/// Self-refines `policy` (instructed on `source`, or the base) on `data`'s
/// training split at `fraction`.
pub fn refine(
    cfg: &RunConfig,
    policy: &PolicyModel,
    source: &str,
    data: &TaskData,
    fraction: Fraction,
    global_seed: u64,
) -> Result<RefineOutcome> {
    let demos = data.train_at(fraction);
    let rcfg = RefineConfig {
        seed: seeds::refine(global_seed, source, &data.spec.task_id, fraction),
        ..cfg.refine.clone()
    };
    self_refine(policy, &demos, &rcfg)
}

/// Test-split evaluation under `kind` prompts.
pub fn evaluate_on(cfg: &RunConfig, policy: &PolicyModel, data: &TaskData, kind: PromptKind, global_seed: u64) -> Evaluation {
    let gen = cfg.generation(seeds::eval(global_seed, &data.spec.task_id));
    evaluate(policy, &data.test, kind, &gen, cfg.eval.workers.max(1))
}

// ---------------------------------------------------------------------------
// Experiments

/// Step-by-step test accuracy of the three curve regimes at one fraction.
#[derive(Debug, Clone)]
pub struct FractionResult {
    pub it: Evaluation,
    pub it_refine: Evaluation,
    pub refine_only: Evaluation,
}

/// One seed of the single-task experiment: the base policy and, per
/// fraction, instruction-tuning, IT followed by self-refinement, and
/// self-refinement of the base policy.
#[derive(Debug, Clone)]
pub struct SeedResult {
    pub seed: u64,
    pub baseline: Evaluation,
    pub fractions: BTreeMap<Fraction, FractionResult>,
    /// Wall time of data preparation, the base policy, and the full-data
    /// IT and IT+refine runs with their evaluations.
    pub standard_seconds: f64,
    pub total_seconds: f64,
}

/// Runs the single-task experiment for the first configured task at every
/// fraction in `fractions`.
pub fn run_seed(cfg: &RunConfig, global_seed: u64, fractions: &[Fraction]) -> Result<SeedResult> {
    let start = Instant::now();
    let spec = cfg.corpus.tasks.first().ok_or_else(|| Error::Config("no tasks".into()))?;
    let data = prepare_task(cfg, spec, global_seed, None)?;
    let base = base_policy(cfg, std::slice::from_ref(&data), global_seed)?;
    let baseline = evaluate_on(cfg, &base, &data, PromptKind::Cot, global_seed);
    log::info!("seed {global_seed}: baseline {:.1}%", baseline.accuracy());
    let mut standard = start.elapsed().as_secs_f64();
    let mut out = BTreeMap::new();
    for &fraction in fractions {
        let t = Instant::now();
        let it = tune(cfg, &base, &data, fraction, global_seed)?.policy;
        let it_eval = evaluate_on(cfg, &it, &data, PromptKind::Cot, global_seed);
        let refined = refine(cfg, &it, &spec.task_id, &data, fraction, global_seed)?.policy;
        let it_refine = evaluate_on(cfg, &refined, &data, PromptKind::Cot, global_seed);
        if fraction == Fraction::Full {
            standard += t.elapsed().as_secs_f64();
        }
        let refine_only = refine(cfg, &base, "base", &data, fraction, global_seed)?.policy;
        let r = FractionResult {
            it: it_eval,
            it_refine,
            refine_only: evaluate_on(cfg, &refine_only, &data, PromptKind::Cot, global_seed),
        };
        log::info!(
            "seed {global_seed} fraction {fraction}: it {:.1}% it+refine {:.1}% refine-only {:.1}%",
            r.it.accuracy(),
            r.it_refine.accuracy(),
            r.refine_only.accuracy()
        );
        out.insert(fraction, r);
    }
    Ok(SeedResult {
        seed: global_seed,
        baseline,
        fractions: out,
        standard_seconds: standard,
        total_seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::answer::target_in;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("sede = 3").is_err());
        assert!(RunConfig::from_toml("[instruct]\nepoch = 3").is_err());
    }

    #[test]
    fn stage_seeds_are_distinct() {
        let a = seeds::instruct(1, "t", Fraction::Full);
        assert_ne!(a, seeds::instruct(1, "t", Fraction::Half));
        assert_ne!(a, seeds::instruct(2, "t", Fraction::Full));
        assert_ne!(seeds::refine(1, "base", "t", Fraction::Full), seeds::refine(1, "t", "t", Fraction::Full));
    }

    #[test]
    fn scrambled_answers_keep_layout_and_agree_with_their_target() {
        let cfg = RunConfig {
            corpus: CorpusConfig {
                train_size: 40,
                test_size: 5,
                ..CorpusConfig::default()
            },
            ..RunConfig::default()
        };
        let data = prepare_task(&cfg, &cfg.corpus.tasks[0], 3, None).unwrap();
        let s = scramble(&data.train, 9);
        let moved = s.iter().zip(&data.train).filter(|(a, b)| a.target != b.target).count();
        assert!(moved > 10, "{moved}");
        for (a, b) in s.iter().zip(&data.train) {
            assert_eq!(a.teacher_cot_answer.lines().count(), b.teacher_cot_answer.lines().count());
            assert!(target_in(&a.teacher_cot_answer, &a.target));
        }
    }
}
