//! Artifact layout, freshness stamps and the cached pipeline stages.
//!
//! Every artifact is sealed with a stamp file holding the hash of the
//! configuration that produced it, chained through the hashes of its
//! inputs. A stage whose stamp matches is skipped; a changed field in any
//! upstream section changes every downstream hash.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use selfrefine::corpus::{
    load_demonstrations, load_split_manifest, read_jsonl, save_demonstrations, save_split_manifest, write_jsonl,
    Fraction, TaskItem, TaskSpec,
};
use selfrefine::eval::{
    cross_matrix, low_resource_curve, AccuracyCell, CellKey, CurvePoint, CurveRegime, EvalRecord, Evaluation,
    MatrixSpec, PromptKind, Regime,
};
use selfrefine::pipeline::{self, RunConfig, TaskData};
use selfrefine::policy::{Checkpoint, PolicyModel};
use selfrefine::refine::save_pairs;
use selfrefine::train::{config_hash, write_log_csv};

use crate::error::{io, CliError, CliResult};

/// `out_dir/<kind>/<run_id>`.
pub fn run_dir(cfg: &RunConfig, kind: &str) -> PathBuf {
    cfg.out_dir.join(kind).join(&cfg.run_id)
}

fn stamp_path(target: &Path) -> PathBuf {
    let mut name = target.file_name().unwrap_or_default().to_os_string();
    name.push(".hash");
    target.with_file_name(name)
}

fn read_stamp(target: &Path) -> Option<String> {
    std::fs::read_to_string(stamp_path(target)).ok().map(|s| s.trim().to_string())
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_os_string();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| io(path, e))
}

/// Exclusive ownership of a run; removed on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(cfg: &RunConfig) -> CliResult<Self> {
        let dir = run_dir(cfg, "reports");
        std::fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Locked(path)),
            Err(e) => Err(io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Writes the resolved configuration next to the reports.
pub fn write_snapshot(cfg: &RunConfig) -> CliResult<PathBuf> {
    let path = run_dir(cfg, "reports").join("config.toml");
    write_atomic(&path, cfg.to_toml().as_bytes())?;
    Ok(path)
}

/// A sealed output: the files a stage writes and the stamp guarding them.
struct Artifact {
    what: String,
    files: Vec<PathBuf>,
    /// The stamp is written next to this file.
    anchor: PathBuf,
    hash: String,
    producer: &'static str,
}

impl Artifact {
    fn fresh(&self) -> bool {
        self.files.iter().all(|f| f.exists()) && read_stamp(&self.anchor).as_deref() == Some(self.hash.as_str())
    }

    fn seal(&self) -> CliResult<()> {
        write_atomic(&stamp_path(&self.anchor), format!("{}\n", self.hash).as_bytes())
    }
}

/// Accuracy summary stored beside each evaluation's records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub accuracy: f64,
    pub n: usize,
    pub correct: usize,
    pub extraction_misses: usize,
    pub generation_errors: usize,
    pub well_formed_fraction: f64,
}

impl From<&Evaluation> for Summary {
    fn from(e: &Evaluation) -> Self {
        Summary {
            accuracy: e.accuracy(),
            n: e.n(),
            correct: e.correct,
            extraction_misses: e.extraction_misses,
            generation_errors: e.generation_errors,
            well_formed_fraction: e.well_formed_fraction(),
        }
    }
}

/// A policy produced by the pipeline.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PolicyRef {
    Base,
    /// Instruction-tuned on `task`.
    Instructed { task: String, fraction: Fraction },
    /// `source` (instruction-tuned on that task, or the base policy when
    /// `None`) self-refined on `task`.
    Refined {
        source: Option<String>,
        task: String,
        fraction: Fraction,
    },
}

fn fraction_tag(f: Fraction) -> String {
    format!("{:03}", (f.value() * 100.0).round() as u32)
}

impl PolicyRef {
    pub fn name(&self, cfg: &RunConfig) -> String {
        match self {
            PolicyRef::Base => "base".into(),
            PolicyRef::Instructed { task, fraction } => format!("it-{task}-f{}", fraction_tag(*fraction)),
            PolicyRef::Refined { source, task, fraction } => format!(
                "sr-{}-{}-on-{task}-f{}",
                variant_name(cfg),
                source.as_deref().unwrap_or("base"),
                fraction_tag(*fraction)
            ),
        }
    }

    fn producer(&self) -> &'static str {
        match self {
            PolicyRef::Base | PolicyRef::Instructed { .. } => "tune",
            PolicyRef::Refined { .. } => "refine",
        }
    }
}

fn variant_name(cfg: &RunConfig) -> &'static str {
    match cfg.refine.variant {
        selfrefine::refine::Variant::Cot => "cot",
        selfrefine::refine::Variant::Answer => "answer",
    }
}

fn kind_name(kind: PromptKind) -> &'static str {
    match kind {
        PromptKind::Standard => "standard",
        PromptKind::Cot => "cot",
    }
}

/// The configuration of a run plus how missing inputs are handled.
pub struct Run {
    pub cfg: RunConfig,
    /// Build missing or stale upstream artifacts instead of failing.
    pub build_upstream: bool,
}

impl Run {
    pub fn new(cfg: RunConfig) -> Self {
        Run {
            cfg,
            build_upstream: false,
        }
    }

    fn dir(&self, kind: &str, seed: u64) -> PathBuf {
        run_dir(&self.cfg, kind).join(format!("seed-{seed}"))
    }

    /// Skips a fresh artifact, builds it when `own` or when upstream
    /// building is allowed, and fails naming the producer otherwise.
    fn ensure(&self, a: &Artifact, own: bool, build: impl FnOnce() -> CliResult<()>) -> CliResult<()> {
        if a.fresh() {
            if own {
                log::info!("{} up to date", a.what);
            }
            return Ok(());
        }
        if !own && !self.build_upstream {
            let path = a.anchor.clone();
            let what = a.what.clone();
            return Err(if a.files.iter().all(|f| f.exists()) {
                CliError::Stale {
                    what,
                    path,
                    command: a.producer,
                }
            } else {
                CliError::Missing {
                    what,
                    path,
                    command: a.producer,
                }
            });
        }
        log::info!("building {}", a.what);
        build()?;
        a.seal()
    }

    // -- hashes ------------------------------------------------------------

    fn items_hash(&self, seed: u64, spec: &TaskSpec) -> String {
        let c = &self.cfg.corpus;
        config_hash(&("items", spec, c.train_size, c.test_size, seed))
    }

    fn data_hash(&self, seed: u64, spec: &TaskSpec) -> String {
        let t = &self.cfg.teacher;
        let ext = &t.external;
        // concurrency and the audit log do not change the annotations
        let teacher = (&t.kind, t.max_reject_rate, &ext.endpoint, &ext.model, ext.temperature, ext.max_attempts);
        config_hash(&("data", self.items_hash(seed, spec), teacher))
    }

    fn base_hash(&self, seed: u64) -> String {
        let data: Vec<String> = self.cfg.corpus.tasks.iter().map(|s| self.data_hash(seed, s)).collect();
        config_hash(&("base", data, &self.cfg.policy, seed))
    }

    fn policy_hash(&self, seed: u64, p: &PolicyRef) -> CliResult<String> {
        Ok(match p {
            PolicyRef::Base => self.base_hash(seed),
            PolicyRef::Instructed { task, fraction } => {
                let spec = self.cfg.task(task)?;
                config_hash(&("it", self.base_hash(seed), self.data_hash(seed, spec), &self.cfg.instruct, fraction))
            }
            PolicyRef::Refined { source, task, fraction } => {
                let upstream = match source {
                    Some(s) => self.policy_hash(seed, &PolicyRef::Instructed { task: s.clone(), fraction: *fraction })?,
                    None => self.base_hash(seed),
                };
                let spec = self.cfg.task(task)?;
                config_hash(&("sr", upstream, self.data_hash(seed, spec), &self.cfg.refine, fraction))
            }
        })
    }

    // -- stages ------------------------------------------------------------

    pub fn items(&self, seed: u64, spec: &TaskSpec, own: bool) -> CliResult<Vec<TaskItem>> {
        let path = self.dir("corpus", seed).join(&spec.task_id).join("items.jsonl");
        let a = Artifact {
            what: format!("generated items for `{}` (seed {seed})", spec.task_id),
            files: vec![path.clone()],
            anchor: path.clone(),
            hash: self.items_hash(seed, spec),
            producer: "gen-data",
        };
        self.ensure(&a, own, || {
            let items = pipeline::generate_items(&self.cfg, spec, seed)?;
            write_jsonl(&items, &path)?;
            Ok(())
        })?;
        Ok(read_jsonl(&path)?)
    }

    pub fn data(&self, seed: u64, spec: &TaskSpec, own: bool) -> CliResult<TaskData> {
        let dir = self.dir("corpus", seed).join(&spec.task_id);
        let [train, test, splits, rejected] =
            ["train.jsonl", "test.jsonl", "splits.jsonl", "rejected.jsonl"].map(|f| dir.join(f));
        let a = Artifact {
            what: format!("annotated corpus for `{}` (seed {seed})", spec.task_id),
            files: vec![train.clone(), test.clone(), splits.clone(), rejected.clone()],
            anchor: train.clone(),
            hash: self.data_hash(seed, spec),
            producer: "annotate",
        };
        self.ensure(&a, own, || {
            let items = self.items(seed, spec, false)?;
            let data = pipeline::annotate_items(&self.cfg, spec, &items, seed, Some(rejected.clone()))?;
            save_demonstrations(&data.test, &test)?;
            save_split_manifest(&data.splits, &splits)?;
            save_demonstrations(&data.train, &train)?;
            Ok(())
        })?;
        Ok(TaskData {
            spec: spec.clone(),
            train: load_demonstrations(&train)?,
            test: load_demonstrations(&test)?,
            splits: load_split_manifest(&splits)?,
            quarantined: read_jsonl(&rejected)?,
        })
    }

    fn all_data(&self, seed: u64) -> CliResult<Vec<TaskData>> {
        self.cfg.corpus.tasks.iter().map(|s| self.data(seed, s, false)).collect()
    }

    fn checkpoint_path(&self, seed: u64, p: &PolicyRef) -> PathBuf {
        self.dir("checkpoints", seed).join(format!("{}.ckpt", p.name(&self.cfg)))
    }

    /// Loads (building if this is the command's own stage) a policy.
    pub fn policy(&self, seed: u64, p: &PolicyRef, own: bool) -> CliResult<PolicyModel> {
        let path = self.checkpoint_path(seed, p);
        let a = Artifact {
            what: format!("checkpoint `{}` (seed {seed})", p.name(&self.cfg)),
            files: vec![path.clone()],
            anchor: path.clone(),
            hash: self.policy_hash(seed, p)?,
            producer: p.producer(),
        };
        self.ensure(&a, own, || self.build_policy(seed, p, &path))?;
        Ok(Checkpoint::load(&path)?.policy)
    }

    fn build_policy(&self, seed: u64, p: &PolicyRef, path: &Path) -> CliResult<()> {
        let cfg = &self.cfg;
        let log_path = path.with_extension("log.csv");
        match p {
            PolicyRef::Base => {
                let data = self.all_data(seed)?;
                let model = pipeline::base_policy(cfg, &data, seed)?;
                pipeline::base_checkpoint(&model, cfg).save(path)?;
            }
            PolicyRef::Instructed { task, fraction } => {
                let base = self.policy(seed, &PolicyRef::Base, false)?;
                let data = self.data(seed, cfg.task(task)?, false)?;
                let out = pipeline::tune(cfg, &base, &data, *fraction, seed)?;
                write_log_csv(&out.log, false, &log_path)?;
                out.checkpoint.save(path)?;
            }
            PolicyRef::Refined { source, task, fraction } => {
                let upstream = match source {
                    Some(s) => PolicyRef::Instructed {
                        task: s.clone(),
                        fraction: *fraction,
                    },
                    None => PolicyRef::Base,
                };
                let start = self.policy(seed, &upstream, false)?;
                let data = self.data(seed, cfg.task(task)?, false)?;
                let source_name = source.as_deref().unwrap_or("base");
                let out = pipeline::refine(cfg, &start, source_name, &data, *fraction, seed)?;
                let pairs = self.dir("pairs", seed).join(format!("{}.jsonl", p.name(cfg)));
                save_pairs(&out.pairs.pairs, &pairs)?;
                write_log_csv(&out.log, true, &log_path)?;
                log::info!(
                    "selected step {} of {} ({} train / {} validation pairs)",
                    out.selected_step,
                    cfg.refine.max_steps,
                    out.train_pairs,
                    out.validation_pairs
                );
                out.checkpoint.save(path)?;
            }
        }
        Ok(())
    }

    fn eval_paths(&self, seed: u64, p: &PolicyRef, task: &str, kind: PromptKind) -> (PathBuf, PathBuf) {
        let stem = format!("{}-eval-{task}-{}", p.name(&self.cfg), kind_name(kind));
        let dir = self.dir("eval", seed);
        (dir.join(format!("{stem}.jsonl")), dir.join(format!("{stem}.json")))
    }

    fn eval_artifact(&self, seed: u64, p: &PolicyRef, task: &str, kind: PromptKind) -> CliResult<Artifact> {
        let (records, summary) = self.eval_paths(seed, p, task, kind);
        let e = &self.cfg.eval;
        let spec = self.cfg.task(task)?;
        Ok(Artifact {
            what: format!("evaluation of `{}` on `{task}` ({} prompts, seed {seed})", p.name(&self.cfg), kind_name(kind)),
            files: vec![records, summary.clone()],
            anchor: summary,
            hash: config_hash(&(
                "eval",
                self.policy_hash(seed, p)?,
                self.data_hash(seed, spec),
                e.temperature,
                e.max_new_tokens,
                kind,
            )),
            producer: "eval",
        })
    }

    pub fn evaluation(&self, seed: u64, p: &PolicyRef, task: &str, kind: PromptKind, own: bool) -> CliResult<Summary> {
        let a = self.eval_artifact(seed, p, task, kind)?;
        let (records, summary) = self.eval_paths(seed, p, task, kind);
        self.ensure(&a, own, || {
            let policy = self.policy(seed, p, false)?;
            let data = self.data(seed, self.cfg.task(task)?, false)?;
            let result = pipeline::evaluate_on(&self.cfg, &policy, &data, kind, seed);
            let s = Summary::from(&result);
            log::info!(
                "{} on {task} ({}): {:.2}% of {}",
                p.name(&self.cfg),
                kind_name(kind),
                s.accuracy,
                s.n
            );
            write_jsonl(&result.records, &records)?;
            write_atomic(&summary, &serde_json::to_vec_pretty(&s).expect("summary serializes"))
        })?;
        let bytes = std::fs::read(&summary).map_err(|e| io(&summary, e))?;
        serde_json::from_slice(&bytes)
            .map_err(|e| selfrefine::Error::parse(summary.display().to_string(), e.to_string()).into())
    }

    pub fn eval_records(&self, seed: u64, p: &PolicyRef, task: &str, kind: PromptKind) -> CliResult<Vec<EvalRecord>> {
        Ok(read_jsonl(&self.eval_paths(seed, p, task, kind).0)?)
    }

    /// The evaluations `eval` produces: baselines under both prompt forms,
    /// then the instructed and refined policies under step-by-step prompts.
    pub fn standard_evals(&self, fraction: Fraction) -> Vec<(PolicyRef, String, PromptKind)> {
        let mut out = Vec::new();
        for spec in &self.cfg.corpus.tasks {
            let t = spec.task_id.clone();
            out.push((PolicyRef::Base, t.clone(), PromptKind::Standard));
            out.push((PolicyRef::Base, t.clone(), PromptKind::Cot));
            out.push((
                PolicyRef::Instructed {
                    task: t.clone(),
                    fraction,
                },
                t.clone(),
                PromptKind::Cot,
            ));
            out.push((
                PolicyRef::Refined {
                    source: Some(t.clone()),
                    task: t.clone(),
                    fraction,
                },
                t,
                PromptKind::Cot,
            ));
        }
        out
    }

    // -- tables ------------------------------------------------------------

    fn matrix_policy(key: &CellKey, fraction: Fraction) -> (PolicyRef, PromptKind) {
        let trained = key.trained_on.clone().unwrap_or_default();
        match key.regime {
            Regime::Baseline => (PolicyRef::Base, PromptKind::Standard),
            Regime::BaselineCot => (PolicyRef::Base, PromptKind::Cot),
            Regime::InstructionTuning => (PolicyRef::Instructed { task: trained, fraction }, PromptKind::Cot),
            Regime::SelfRefine => (
                PolicyRef::Refined {
                    source: Some(trained.clone()),
                    task: trained,
                    fraction,
                },
                PromptKind::Cot,
            ),
            Regime::CrossSelfRefine => (
                PolicyRef::Refined {
                    source: Some(trained),
                    task: key.evaluated_on.clone(),
                    fraction,
                },
                PromptKind::Cot,
            ),
        }
    }

    fn matrix_spec(&self, regimes: Vec<Regime>, seeds: Vec<u64>) -> MatrixSpec {
        let tasks: Vec<String> = self.cfg.corpus.tasks.iter().map(|t| t.task_id.clone()).collect();
        MatrixSpec {
            train_tasks: tasks.clone(),
            eval_tasks: tasks,
            regimes,
            seeds,
        }
    }

    /// Every cell over the configured seeds, building what is missing.
    pub fn full_matrix(&self, fraction: Fraction) -> CliResult<Vec<AccuracyCell>> {
        let spec = self.matrix_spec(
            vec![
                Regime::Baseline,
                Regime::BaselineCot,
                Regime::InstructionTuning,
                Regime::SelfRefine,
                Regime::CrossSelfRefine,
            ],
            self.cfg.eval.seeds.clone(),
        );
        let mut failure = None;
        let cells = cross_matrix(&spec, |key, seed| {
            if failure.is_some() {
                return None;
            }
            let (p, kind) = Self::matrix_policy(key, fraction);
            match self.evaluation(seed, &p, &key.evaluated_on, kind, true) {
                Ok(s) => Some((s.accuracy, s.n)),
                Err(e) => {
                    failure = Some(e);
                    None
                }
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(cells),
        }
    }

    /// The cells available from this seed's `eval` outputs; the rest are
    /// absent.
    pub fn eval_matrix(&self, fraction: Fraction) -> CliResult<Vec<AccuracyCell>> {
        let spec = self.matrix_spec(
            vec![Regime::Baseline, Regime::BaselineCot, Regime::InstructionTuning, Regime::SelfRefine],
            vec![self.cfg.seed],
        );
        let mut failure = None;
        let cells = cross_matrix(&spec, |key, seed| {
            if key.trained_on.as_ref().is_some_and(|t| *t != key.evaluated_on) {
                return None;
            }
            let (p, kind) = Self::matrix_policy(key, fraction);
            match self.evaluation(seed, &p, &key.evaluated_on, kind, false) {
                Ok(s) => Some((s.accuracy, s.n)),
                Err(e) => {
                    failure.get_or_insert(e);
                    None
                }
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(cells),
        }
    }

    /// IT, IT+refine and refine-only accuracy on the first task at every
    /// configured fraction and seed.
    pub fn curve(&self) -> CliResult<Vec<CurvePoint>> {
        let task = self
            .cfg
            .corpus
            .tasks
            .first()
            .map(|t| t.task_id.clone())
            .ok_or_else(|| selfrefine::Error::Config("no tasks".into()))?;
        let mut failure = None;
        let points = low_resource_curve(&self.cfg.eval.fractions, &CurveRegime::ALL, &self.cfg.eval.seeds, |fraction, regime, seed| {
            if failure.is_some() {
                return None;
            }
            let p = match regime {
                CurveRegime::ItOnly => PolicyRef::Instructed {
                    task: task.clone(),
                    fraction,
                },
                CurveRegime::ItRefine => PolicyRef::Refined {
                    source: Some(task.clone()),
                    task: task.clone(),
                    fraction,
                },
                CurveRegime::RefineOnly => PolicyRef::Refined {
                    source: None,
                    task: task.clone(),
                    fraction,
                },
            };
            match self.evaluation(seed, &p, &task, PromptKind::Cot, true) {
                Ok(s) => Some((s.accuracy, s.n)),
                Err(e) => {
                    failure = Some(e);
                    None
                }
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(points),
        }
    }

    /// Hash of everything a multi-seed table depends on.
    pub fn table_hash(&self, name: &str, fraction: Fraction) -> String {
        let mut cfg = self.cfg.clone();
        cfg.out_dir = PathBuf::new();
        cfg.eval.workers = 0;
        config_hash(&(name, cfg, fraction))
    }

    pub fn table_path(&self, name: &str) -> PathBuf {
        run_dir(&self.cfg, "eval").join(format!("{name}.json"))
    }

    pub fn save_table<T: Serialize>(&self, name: &str, fraction: Fraction, rows: &[T]) -> CliResult<()> {
        let path = self.table_path(name);
        write_atomic(&path, &serde_json::to_vec_pretty(rows).expect("table serializes"))?;
        write_atomic(&stamp_path(&path), format!("{}\n", self.table_hash(name, fraction)).as_bytes())
    }

    /// A saved table, if it matches the current configuration.
    pub fn load_table<T: for<'de> Deserialize<'de>>(&self, name: &str, fraction: Fraction) -> CliResult<Option<Vec<T>>> {
        let path = self.table_path(name);
        if !path.exists() {
            return Ok(None);
        }
        if read_stamp(&path).as_deref() != Some(self.table_hash(name, fraction).as_str()) {
            log::warn!("{} is out of date; rerun `selfrefine {name}` to include it", path.display());
            return Ok(None);
        }
        let bytes = std::fs::read(&path).map_err(|e| io(&path, e))?;
        serde_json::from_slice(&bytes)
            .map(Some)
            .map_err(|e| selfrefine::Error::parse(path.display().to_string(), e.to_string()).into())
    }
}

/// Per-task record counts, for progress notes.
pub fn describe(data: &TaskData) -> BTreeMap<&'static str, usize> {
    BTreeMap::from([
        ("train", data.train.len()),
        ("test", data.test.len()),
        ("quarantined", data.quarantined.len()),
    ])
}
