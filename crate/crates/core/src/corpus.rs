//! Demonstration data: synthetic task generation, prompt rendering,
//! persistence with validation, and nested low-resource splits.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::answer::{self, AnswerSpace};
use crate::error::{Error, FieldViolation, Result};

/// Appended to a prompt to elicit a step-by-step answer.
pub const COT_SUFFIX: &str = "Let's think step by step";

const MATH_INSTRUCTION: &str = "Answer the following mathematical question with numerical solution.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    MultipleChoice,
    Numeric,
}

/// Content family used by the synthetic generator for multiple-choice tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Theme {
    /// "Which one is a fruit?"
    #[default]
    Category,
    /// "Which one can fly?"
    Property,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub kind: TaskKind,
    #[serde(default)]
    pub n_choices: Option<usize>,
    #[serde(default)]
    pub theme: Theme,
}

impl TaskSpec {
    pub fn multiple_choice(task_id: impl Into<String>, n_choices: usize, theme: Theme) -> Self {
        TaskSpec {
            task_id: task_id.into(),
            kind: TaskKind::MultipleChoice,
            n_choices: Some(n_choices),
            theme,
        }
    }

    pub fn numeric(task_id: impl Into<String>) -> Self {
        TaskSpec {
            task_id: task_id.into(),
            kind: TaskKind::Numeric,
            n_choices: None,
            theme: Theme::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.task_id.trim().is_empty() {
            return Err(Error::Config("task_id must be non-empty".into()));
        }
        match (self.kind, self.n_choices) {
            (TaskKind::MultipleChoice, Some(n)) if (2..=5).contains(&n) => Ok(()),
            (TaskKind::MultipleChoice, n) => Err(Error::Config(format!(
                "task `{}`: n_choices must be in 2..=5 for multiple_choice, got {n:?}",
                self.task_id
            ))),
            (TaskKind::Numeric, None) => Ok(()),
            (TaskKind::Numeric, Some(_)) => Err(Error::Config(format!(
                "task `{}`: numeric tasks take no n_choices",
                self.task_id
            ))),
        }
    }

    pub fn answer_space(&self) -> AnswerSpace {
        match self.kind {
            TaskKind::MultipleChoice => AnswerSpace::labels(self.n_choices.unwrap_or(0)),
            TaskKind::Numeric => AnswerSpace::Numeric,
        }
    }

    /// The task instruction block (`i`).
    pub fn instruction(&self) -> String {
        match self.kind {
            TaskKind::MultipleChoice => mc_instruction(self.n_choices.unwrap_or(0)),
            TaskKind::Numeric => MATH_INSTRUCTION.to_string(),
        }
    }
}

fn mc_instruction(n: usize) -> String {
    let labels: Vec<String> = (0..n).map(|i| char::from(b'A' + i as u8).to_string()).collect();
    format!(
        "Choose the answer to the question only from options {}.",
        labels.join(", ")
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Choice {
    pub label: String,
    pub text: String,
}

/// One generated task instance before annotation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskItem {
    pub question: String,
    pub choices: Option<Vec<Choice>>,
    pub target: String,
    /// Arithmetic expression whose value is the target (numeric tasks).
    pub expression: Option<String>,
}

/// A task instance with its id and instruction, awaiting teacher answers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DemoSkeleton {
    pub id: String,
    pub task_id: String,
    pub instruction: String,
    pub question: String,
    pub choices: Option<Vec<Choice>>,
    pub target: Option<String>,
    pub expression: Option<String>,
}

impl DemoSkeleton {
    pub fn answer_space(&self) -> AnswerSpace {
        space_for(self.choices.as_deref())
    }

    /// Renders the student/teacher prompt for this skeleton.
    pub fn prompt(&self, cot: bool) -> String {
        render(&self.instruction, &self.question, self.choices.as_deref(), cot)
    }
}

/// A teacher-annotated example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demonstration {
    pub id: String,
    pub task_id: String,
    pub instruction: String,
    pub question: String,
    pub choices: Option<Vec<Choice>>,
    pub target: String,
    pub teacher_answer: String,
    pub teacher_cot_answer: String,
}

impl Demonstration {
    pub fn answer_space(&self) -> AnswerSpace {
        space_for(self.choices.as_deref())
    }

    pub fn validate(&self) -> std::result::Result<(), Vec<FieldViolation>> {
        let mut out = Vec::new();
        let mut bad = |field: &'static str, reason: String| {
            out.push(FieldViolation {
                record_id: self.id.clone(),
                field,
                reason,
            })
        };
        if self.id.trim().is_empty() {
            bad("id", "empty".into());
        }
        if self.task_id.trim().is_empty() {
            bad("task_id", "empty".into());
        }
        if self.instruction.trim().is_empty() {
            bad("instruction", "empty".into());
        }
        if self.question.trim().is_empty() {
            bad("question", "empty".into());
        }
        if let Some(choices) = &self.choices {
            if !(2..=5).contains(&choices.len()) {
                bad("choices", format!("{} choices, expected 2 to 5", choices.len()));
            }
            for (i, c) in choices.iter().enumerate() {
                let expected = char::from(b'A' + i as u8).to_string();
                if c.label != expected {
                    bad("choices", format!("choice {i} labeled `{}`, expected `{expected}`", c.label));
                }
                if c.text.trim().is_empty() {
                    bad("choices", format!("choice `{}` has empty text", c.label));
                }
            }
        }
        let space = self.answer_space();
        if self.target.trim().is_empty() {
            bad("target", "empty".into());
        } else if space.normalize(&self.target).is_none() {
            let reason = match &space {
                AnswerSpace::Labels(l) => format!(
                    "`{}` is not one of {}",
                    self.target,
                    l.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(", ")
                ),
                AnswerSpace::Numeric => format!("`{}` is not a number", self.target),
            };
            bad("target", reason);
        }
        if self.teacher_answer.trim().is_empty() {
            bad("teacher_answer", "empty".into());
        }
        if self.teacher_cot_answer.trim().is_empty() {
            bad("teacher_cot_answer", "empty".into());
        } else if !self.target.trim().is_empty()
            && !answer::target_in(&self.teacher_cot_answer, &self.target)
        {
            bad("teacher_cot_answer", "target not in CoT answer".into());
        }
        if out.is_empty() {
            Ok(())
        } else {
            Err(out)
        }
    }
}

fn space_for(choices: Option<&[Choice]>) -> AnswerSpace {
    match choices {
        Some(c) => AnswerSpace::labels(c.len()),
        None => AnswerSpace::Numeric,
    }
}

fn render(instruction: &str, question: &str, choices: Option<&[Choice]>, cot: bool) -> String {
    let mut s = String::new();
    s.push_str(instruction);
    s.push_str("\nQuestion: ");
    s.push_str(question);
    if let Some(choices) = choices {
        s.push_str("\nChoices:");
        for c in choices {
            s.push('\n');
            s.push_str(&c.label);
            s.push_str(") ");
            s.push_str(&c.text);
        }
    }
    s.push_str("\nAnswer:");
    if cot {
        s.push(' ');
        s.push_str(COT_SUFFIX);
    }
    s
}

/// Renders `x` (instruction, question, choices, `Answer:`) or, with `cot`,
/// `x` followed by the step-by-step suffix.
pub fn render_prompt(demo: &Demonstration, cot: bool) -> String {
    render(&demo.instruction, &demo.question, demo.choices.as_deref(), cot)
}

// ---------------------------------------------------------------------------
// Synthetic generation

/// Word lists behind the multiple-choice themes. The oracle teacher reads
/// the same tables to write its rationales.
pub mod lexicon {
    use super::Theme;

    pub struct Group {
        /// Question stem completion, e.g. "is a fruit" in "Which one is a fruit?".
        pub ask: &'static str,
        /// Per-choice rationale, e.g. "a fruit".
        pub describe: &'static str,
        pub members: [&'static str; 6],
    }

    pub const CATEGORIES: &[Group] = &[
        Group { ask: "is a fruit", describe: "a fruit", members: ["apple", "pear", "plum", "grape", "lemon", "mango"] },
        Group { ask: "is an animal", describe: "an animal", members: ["horse", "tiger", "sheep", "mouse", "camel", "zebra"] },
        Group { ask: "is a color", describe: "a color", members: ["red", "blue", "green", "pink", "brown", "black"] },
        Group { ask: "is a tool", describe: "a tool", members: ["hammer", "saw", "drill", "wrench", "chisel", "shovel"] },
        Group { ask: "is a metal", describe: "a metal", members: ["iron", "copper", "silver", "gold", "zinc", "tin"] },
        Group { ask: "is a vehicle", describe: "a vehicle", members: ["car", "bus", "truck", "train", "boat", "bike"] },
        Group { ask: "is an instrument", describe: "an instrument", members: ["piano", "violin", "drum", "flute", "harp", "guitar"] },
        Group { ask: "is a body part", describe: "a body part", members: ["hand", "knee", "elbow", "ankle", "wrist", "chin"] },
    ];

    pub const PROPERTIES: &[Group] = &[
        Group { ask: "can fly", describe: "it can fly", members: ["eagle", "crow", "owl", "bee", "moth", "hawk"] },
        Group { ask: "can swim", describe: "it can swim", members: ["shark", "whale", "trout", "eel", "seal", "squid"] },
        Group { ask: "is sweet", describe: "it is sweet", members: ["honey", "candy", "cake", "syrup", "jam", "sugar"] },
        Group { ask: "is hot", describe: "it is hot", members: ["fire", "lava", "sun", "oven", "stove", "flame"] },
        Group { ask: "is cold", describe: "it is cold", members: ["ice", "snow", "frost", "hail", "sleet", "glacier"] },
        Group { ask: "is soft", describe: "it is soft", members: ["pillow", "cotton", "wool", "feather", "sponge", "velvet"] },
    ];

    pub fn groups(theme: Theme) -> &'static [Group] {
        match theme {
            Theme::Category => CATEGORIES,
            Theme::Property => PROPERTIES,
        }
    }

    /// Rationale phrase for a known word in any theme.
    pub fn describe(word: &str) -> Option<&'static str> {
        CATEGORIES
            .iter()
            .chain(PROPERTIES)
            .find(|g| g.members.contains(&word))
            .map(|g| g.describe)
    }
}

const NAMES: &[&str] = &["Sam", "Ana", "Tom", "Mia", "Leo", "Ivy"];
const OBJECTS: &[&str] = &["coins", "pens", "apples", "beads", "cards", "shells"];

/// Generates `n` distinct task instances, deterministically in `(spec, n, seed)`.
pub fn gen_synthetic_tasks(spec: &TaskSpec, n: usize, seed: u64) -> Result<Vec<TaskItem>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Config("n must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    let max_attempts = n.saturating_mul(50).max(1000);
    let mut attempts = 0;
    while out.len() < n {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::Config(format!(
                "task `{}`: could only generate {} distinct items out of {n}",
                spec.task_id,
                out.len()
            )));
        }
        let item = match spec.kind {
            TaskKind::MultipleChoice => gen_choice_item(spec, &mut rng),
            TaskKind::Numeric => gen_numeric_item(&mut rng),
        };
        let key = (item.question.clone(), item.choices.clone());
        if seen.insert(key) {
            out.push(item);
        }
    }
    Ok(out)
}

fn gen_choice_item(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> TaskItem {
    let k = spec.n_choices.unwrap_or(4);
    let groups = lexicon::groups(spec.theme);
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.shuffle(rng);
    let picked = &order[..k.min(groups.len())];
    let answer_group = &groups[picked[0]];
    let mut words: Vec<&str> = picked
        .iter()
        .map(|&g| *groups[g].members.choose(rng).expect("non-empty group"))
        .collect();
    let correct = words[0];
    words.shuffle(rng);
    let pos = words.iter().position(|w| *w == correct).expect("present");
    let choices = words
        .iter()
        .enumerate()
        .map(|(i, w)| Choice {
            label: char::from(b'A' + i as u8).to_string(),
            text: (*w).to_string(),
        })
        .collect();
    TaskItem {
        question: format!("Which one {}?", answer_group.ask),
        choices: Some(choices),
        target: char::from(b'A' + pos as u8).to_string(),
        expression: None,
    }
}

fn gen_numeric_item(rng: &mut ChaCha8Rng) -> TaskItem {
    let name = *NAMES.choose(rng).expect("names");
    let obj = *OBJECTS.choose(rng).expect("objects");
    let mut operands = [0i64; 4];
    for v in operands.iter_mut() {
        *v = rng.gen_range(2..=9);
    }
    let [a, b, c, e] = operands;
    let template = rng.gen_range(0..4);
    let (question, expression, value) = match template {
        0 => (
            format!("{name} has {a} {obj} and gets {b} bags with {c} {obj} each. How many {obj} does {name} have?"),
            format!("{a}+{b}*{c}"),
            a + b * c,
        ),
        1 => {
            let c = c.min(a * b - 1);
            (
                format!("{name} buys {a} boxes of {b} {obj} and gives away {c}. How many {obj} are left?"),
                format!("{a}*{b}-{c}"),
                a * b - c,
            )
        }
        2 => (
            format!("{name} has {a} {obj}, finds {b} more, then finds {c} more. How many {obj} does {name} have?"),
            format!("{a}+{b}+{c}"),
            a + b + c,
        ),
        _ => (
            format!("{name} fills {c} jars with {a} red and {b} blue {obj} each, then loses {e}. How many {obj} are left?"),
            format!("({a}+{b})*{c}-{e}"),
            (a + b) * c - e,
        ),
    };
    TaskItem {
        question,
        choices: None,
        target: value.to_string(),
        expression: Some(expression),
    }
}

/// Assigns ids and the task instruction to generated items.
pub fn skeletons(spec: &TaskSpec, items: &[TaskItem]) -> Vec<DemoSkeleton> {
    let instruction = spec.instruction();
    items
        .iter()
        .enumerate()
        .map(|(i, item)| DemoSkeleton {
            id: format!("{}-{i:05}", spec.task_id),
            task_id: spec.task_id.clone(),
            instruction: instruction.clone(),
            question: item.question.clone(),
            choices: item.choices.clone(),
            target: Some(item.target.clone()),
            expression: item.expression.clone(),
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Persistence

pub fn save_demonstrations(demos: &[Demonstration], path: &Path) -> Result<()> {
    write_jsonl(demos, path)
}

/// Loads and validates a corpus. All violations across all records are
/// reported together.
pub fn load_demonstrations(path: &Path) -> Result<Vec<Demonstration>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_demonstrations(BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

/// Record fields are all optional here so that a missing field becomes a
/// validation violation rather than an opaque decode error.
#[derive(Deserialize)]
struct RawDemonstration {
    id: Option<String>,
    task_id: Option<String>,
    instruction: Option<String>,
    question: Option<String>,
    choices: Option<Vec<Choice>>,
    target: Option<String>,
    teacher_answer: Option<String>,
    teacher_cot_answer: Option<String>,
}

pub fn parse_demonstrations(reader: impl BufRead) -> Result<Vec<Demonstration>> {
    let mut demos = Vec::new();
    let mut violations = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<corpus>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawDemonstration = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                violations.push(FieldViolation {
                    record_id: format!("line {}", lineno + 1),
                    field: "record",
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let record_id = raw.id.clone().unwrap_or_else(|| format!("line {}", lineno + 1));
        let mut missing = |field: &'static str, v: Option<String>| {
            v.unwrap_or_else(|| {
                violations.push(FieldViolation {
                    record_id: record_id.clone(),
                    field,
                    reason: "missing".into(),
                });
                String::new()
            })
        };
        let demo = Demonstration {
            id: missing("id", raw.id),
            task_id: missing("task_id", raw.task_id),
            instruction: missing("instruction", raw.instruction),
            question: missing("question", raw.question),
            choices: raw.choices,
            target: missing("target", raw.target),
            teacher_answer: missing("teacher_answer", raw.teacher_answer),
            teacher_cot_answer: missing("teacher_cot_answer", raw.teacher_cot_answer),
        };
        if let Err(v) = demo.validate() {
            // missing fields were already reported once
            let fresh: Vec<FieldViolation> = v
                .into_iter()
                .filter(|f| {
                    !(f.reason == "empty"
                        && violations
                            .iter()
                            .any(|p| p.record_id == f.record_id && p.field == f.field))
                })
                .collect();
            violations.extend(fresh);
        }
        demos.push(demo);
    }
    let mut ids = HashSet::new();
    for d in &demos {
        if !d.id.is_empty() && !ids.insert(d.id.as_str()) {
            violations.push(FieldViolation {
                record_id: d.id.clone(),
                field: "id",
                reason: "duplicate id".into(),
            });
        }
    }
    if violations.is_empty() {
        Ok(demos)
    } else {
        Err(Error::Validation(violations))
    }
}

/// Writes one JSON object per line, creating parent directories.
pub fn write_jsonl<T: Serialize>(records: &[T], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("records serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Splits

/// Share of the training corpus kept in a low-resource split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Fraction {
    Quarter,
    Half,
    ThreeQuarters,
    Full,
}

impl Fraction {
    pub const ALL: [Fraction; 4] = [
        Fraction::Full,
        Fraction::ThreeQuarters,
        Fraction::Half,
        Fraction::Quarter,
    ];

    pub fn value(self) -> f64 {
        match self {
            Fraction::Full => 1.0,
            Fraction::ThreeQuarters => 0.75,
            Fraction::Half => 0.5,
            Fraction::Quarter => 0.25,
        }
    }

    /// `round(fraction * n)` with halves rounded away from zero.
    pub fn size_of(self, n: usize) -> usize {
        (self.value() * n as f64).round() as usize
    }

    pub fn from_value(v: f64) -> Option<Self> {
        Self::ALL.into_iter().find(|f| (f.value() - v).abs() < 1e-9)
    }
}

impl fmt::Display for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2}", self.value())
    }
}

impl FromStr for Fraction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.trim()
            .parse::<f64>()
            .ok()
            .and_then(Fraction::from_value)
            .ok_or_else(|| Error::Config(format!("fraction must be one of 1.0, .75, .5, .25; got `{s}`")))
    }
}

impl Serialize for Fraction {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_f64(self.value())
    }
}

impl<'de> Deserialize<'de> for Fraction {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = f64::deserialize(d)?;
        Fraction::from_value(v)
            .ok_or_else(|| serde::de::Error::custom(format!("unsupported fraction {v}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub fraction: Fraction,
    pub seed: u64,
    pub member_ids: Vec<String>,
}

/// Draws one seeded permutation of the corpus and takes prefixes of it, so
/// every smaller split is a subset of every larger one.
pub fn make_splits(corpus: &[Demonstration], seed: u64) -> BTreeMap<Fraction, DatasetSplit> {
    let mut ids: Vec<String> = corpus.iter().map(|d| d.id.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    Fraction::ALL
        .into_iter()
        .map(|f| {
            let split = DatasetSplit {
                fraction: f,
                seed,
                member_ids: ids[..f.size_of(ids.len())].to_vec(),
            };
            (f, split)
        })
        .collect()
}

/// The demonstrations of `corpus` that belong to `split`, in split order.
pub fn select<'a>(corpus: &'a [Demonstration], split: &DatasetSplit) -> Vec<&'a Demonstration> {
    let by_id: BTreeMap<&str, &Demonstration> = corpus.iter().map(|d| (d.id.as_str(), d)).collect();
    split
        .member_ids
        .iter()
        .filter_map(|id| by_id.get(id.as_str()).copied())
        .collect()
}

pub fn save_split_manifest(splits: &BTreeMap<Fraction, DatasetSplit>, path: &Path) -> Result<()> {
    let records: Vec<&DatasetSplit> = splits.values().rev().collect();
    write_jsonl(&records, path)
}

pub fn parse_split_manifest(reader: impl BufRead) -> Result<BTreeMap<Fraction, DatasetSplit>> {
    let mut out = BTreeMap::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<manifest>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let split: DatasetSplit = serde_json::from_str(&line)
            .map_err(|e| Error::parse(format!("manifest line {}", lineno + 1), e.to_string()))?;
        out.insert(split.fraction, split);
    }
    Ok(out)
}

pub fn load_split_manifest(path: &Path) -> Result<BTreeMap<Fraction, DatasetSplit>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_split_manifest(BufReader::new(file))
}

/// Reads one JSON object per line; blank lines are skipped.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line)
            .map_err(|e| Error::parse(format!("{}:{}", path.display(), lineno + 1), e.to_string()))?;
        out.push(record);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo(id: &str, target: &str) -> Demonstration {
        Demonstration {
            id: id.into(),
            task_id: "obqa".into(),
            instruction: mc_instruction(4),
            question: "Which form can be made into a triangle?".into(),
            choices: Some(
                ["ice", "steam", "water", "salt water"]
                    .iter()
                    .enumerate()
                    .map(|(i, t)| Choice {
                        label: char::from(b'A' + i as u8).to_string(),
                        text: t.to_string(),
                    })
                    .collect(),
            ),
            target: target.into(),
            teacher_answer: target.into(),
            teacher_cot_answer: format!("A) ice: a solid\nSo the answer is {target}) ice."),
        }
    }

    #[test]
    fn spec_validation() {
        assert!(TaskSpec::multiple_choice("t", 4, Theme::Category).validate().is_ok());
        assert!(TaskSpec::multiple_choice("t", 1, Theme::Category).validate().is_err());
        assert!(TaskSpec::multiple_choice("t", 6, Theme::Category).validate().is_err());
        assert!(TaskSpec::numeric("m").validate().is_ok());
        assert!(gen_synthetic_tasks(&TaskSpec::multiple_choice("t", 7, Theme::Category), 1, 0).is_err());
    }

    #[test]
    fn one_multiple_choice_item() {
        let spec = TaskSpec::multiple_choice("kinds", 4, Theme::Category);
        let items = gen_synthetic_tasks(&spec, 1, 7).unwrap();
        assert_eq!(items.len(), 1);
        let choices = items[0].choices.as_ref().unwrap();
        let labels: Vec<&str> = choices.iter().map(|c| c.label.as_str()).collect();
        assert_eq!(labels, ["A", "B", "C", "D"]);
        // exactly one choice belongs to the asked group
        let q = &items[0].question;
        let hits: Vec<usize> = choices
            .iter()
            .enumerate()
            .filter(|(_, c)| {
                lexicon::CATEGORIES
                    .iter()
                    .any(|g| q.contains(g.ask) && g.members.contains(&c.text.as_str()))
            })
            .map(|(i, _)| i)
            .collect();
        assert_eq!(hits.len(), 1);
        assert_eq!(items[0].target, char::from(b'A' + hits[0] as u8).to_string());
    }

    #[test]
    fn generation_is_deterministic_and_distinct() {
        let spec = TaskSpec::multiple_choice("props", 3, Theme::Property);
        let a = gen_synthetic_tasks(&spec, 300, 11).unwrap();
        let b = gen_synthetic_tasks(&spec, 300, 11).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let distinct: HashSet<_> = a.iter().map(|i| (&i.question, &i.choices)).collect();
        assert_eq!(distinct.len(), 300);
    }

    #[test]
    fn cot_prompt_extends_plain_prompt() {
        let d = demo("d1", "A");
        let plain = render_prompt(&d, false);
        let cot = render_prompt(&d, true);
        assert!(plain.ends_with("Answer:"));
        assert!(plain.contains("\nChoices:\nA) ice\nB) steam\nC) water\nD) salt water\n"));
        assert!(cot.ends_with("Answer: Let's think step by step"));
        assert_eq!(cot, format!("{plain} {COT_SUFFIX}"));
        assert_eq!(render_prompt(&d, true), cot);
    }

    #[test]
    fn numeric_prompt_uses_math_header() {
        let spec = TaskSpec::numeric("math");
        let item = &gen_synthetic_tasks(&spec, 1, 1).unwrap()[0];
        let sk = &skeletons(&spec, std::slice::from_ref(item))[0];
        let p = sk.prompt(false);
        assert!(p.starts_with("Answer the following mathematical question with numerical solution.\nQuestion: "));
        assert!(p.ends_with("Answer:"));
        assert!(!p.contains("Choices:"));
    }

    #[test]
    fn split_sizes_follow_rounding_rule() {
        let corpus: Vec<_> = (0..4).map(|i| demo(&format!("d{i}"), "A")).collect();
        let s = make_splits(&corpus, 3);
        let sizes: Vec<usize> = Fraction::ALL.iter().map(|f| s[f].member_ids.len()).collect();
        assert_eq!(sizes, [4, 3, 2, 1]);
    }

    #[test]
    fn invalid_target_names_field() {
        let d = demo("bad", "F");
        let v = d.validate().unwrap_err();
        assert!(v.iter().any(|f| f.field == "target" && f.record_id == "bad"), "{v:?}");
    }

    #[test]
    fn missing_cot_answer_is_reported_with_id() {
        let line = r#"{"id":"x9","task_id":"t","instruction":"i","question":"q","choices":null,"target":"3","teacher_answer":"3"}"#;
        let err = parse_demonstrations(line.as_bytes()).unwrap_err();
        match err {
            Error::Validation(v) => {
                assert_eq!(v.len(), 1, "{v:?}");
                assert_eq!(v[0].field, "teacher_cot_answer");
                assert_eq!(v[0].record_id, "x9");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn all_violations_are_collected() {
        let good = serde_json::to_string(&demo("ok", "A")).unwrap();
        let bad_target = serde_json::to_string(&demo("b1", "Z")).unwrap();
        let text = format!("{good}\nnot json\n{bad_target}\n");
        match parse_demonstrations(text.as_bytes()).unwrap_err() {
            Error::Validation(v) => {
                assert!(v.iter().any(|f| f.record_id == "line 2"));
                assert!(v.iter().any(|f| f.record_id == "b1" && f.field == "target"));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_demonstrations(Path::new("/nonexistent/corpus.jsonl")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn fraction_parsing() {
        assert_eq!(".75".parse::<Fraction>().unwrap(), Fraction::ThreeQuarters);
        assert_eq!("1.0".parse::<Fraction>().unwrap(), Fraction::Full);
        assert!("0.3".parse::<Fraction>().is_err());
    }
}
