//! String-matching evaluation, accuracy matrices, low-resource curves,
//! LLM-as-judge ratings, and report files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::answer::{self, AnswerSpace};
use crate::corpus::{render_prompt, Demonstration, Fraction, TaskSpec};
use crate::error::{Error, Result};
use crate::policy::{generate, GenerationConfig, Policy};
use crate::teacher::{parallel_map, Completion};
use crate::train::{csv_error, derive_seed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Standard,
    Cot,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub demo_id: String,
    pub prompt_kind: PromptKind,
    pub generated: String,
    pub extracted: Option<String>,
    pub target: String,
    pub correct: bool,
    /// Generation failure, if any; such records count as incorrect.
    pub error: Option<String>,
}

/// The final committed answer of `generated` under `task`'s answer space.
pub fn extract_answer(generated: &str, task: &TaskSpec) -> Option<String> {
    answer::extract(generated, &task.answer_space())
}

/// Whether an extracted answer equals the target: labels compare
/// case-insensitively, numbers by value.
pub fn is_correct(extracted: Option<&str>, target: &str, space: &AnswerSpace) -> bool {
    match (extracted.and_then(|e| space.normalize(e)), space.normalize(target)) {
        (Some(a), Some(b)) => a == b,
        _ => false,
    }
}

/// At least two non-empty lines precede the line holding the final answer.
pub fn is_well_formed_cot(generated: &str, space: &AnswerSpace) -> bool {
    let lines: Vec<&str> = generated.lines().filter(|l| !l.trim().is_empty()).collect();
    lines
        .iter()
        .rposition(|l| answer::extract(l, space).is_some())
        .is_some_and(|i| i >= 2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub records: Vec<EvalRecord>,
    pub correct: usize,
    /// Records with no extractable answer.
    pub extraction_misses: usize,
    pub generation_errors: usize,
    /// Records whose generation is a well-formed step-by-step answer.
    pub well_formed: usize,
}

impl Evaluation {
    pub fn n(&self) -> usize {
        self.records.len()
    }

    /// `100 * correct / N`.
    pub fn accuracy(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        100.0 * self.correct as f64 / self.records.len() as f64
    }

    pub fn well_formed_fraction(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.well_formed as f64 / self.records.len() as f64
    }
}

/// Generates an answer for every demo and scores it. Each demo samples with
/// a seed derived from `config.seed` and its id, so results do not depend on
/// order or worker count.
pub fn evaluate<P: Policy + Sync + ?Sized>(
    policy: &P,
    demos: &[Demonstration],
    kind: PromptKind,
    config: &GenerationConfig,
    workers: usize,
) -> Evaluation {
    let records = parallel_map(demos, workers, |d| {
        let space = d.answer_space();
        let cfg = GenerationConfig {
            seed: derive_seed(config.seed, &d.id),
            ..config.clone()
        };
        let (generated, error) = match generate(policy, &render_prompt(d, kind == PromptKind::Cot), &cfg) {
            Ok(text) => (text, None),
            Err(e) => (String::new(), Some(e.to_string())),
        };
        let extracted = answer::extract(&generated, &space);
        let correct = error.is_none() && is_correct(extracted.as_deref(), &d.target, &space);
        EvalRecord {
            demo_id: d.id.clone(),
            prompt_kind: kind,
            generated,
            extracted,
            target: d.target.clone(),
            correct,
            error,
        }
    });
    summarize(records, demos)
}

fn summarize(records: Vec<EvalRecord>, demos: &[Demonstration]) -> Evaluation {
    let mut eval = Evaluation {
        correct: records.iter().filter(|r| r.correct).count(),
        extraction_misses: records.iter().filter(|r| r.extracted.is_none()).count(),
        generation_errors: records.iter().filter(|r| r.error.is_some()).count(),
        well_formed: 0,
        records,
    };
    eval.well_formed = eval
        .records
        .iter()
        .zip(demos)
        .filter(|(r, d)| is_well_formed_cot(&r.generated, &d.answer_space()))
        .count();
    eval
}

// ---------------------------------------------------------------------------
// Matrices and curves

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Baseline,
    BaselineCot,
    InstructionTuning,
    SelfRefine,
    CrossSelfRefine,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::Baseline => "baseline",
            Regime::BaselineCot => "baseline_cot",
            Regime::InstructionTuning => "instruction_tuning",
            Regime::SelfRefine => "self_refine",
            Regime::CrossSelfRefine => "cross_self_refine",
        }
    }

    /// Baselines do not depend on training data.
    pub fn is_baseline(self) -> bool {
        matches!(self, Regime::Baseline | Regime::BaselineCot)
    }
}

/// Mean accuracy over seeds with the standard error of that mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedStats {
    pub accuracy: f64,
    pub stderr: f64,
    /// Records per seed.
    pub n: usize,
}

/// `None` when `samples` is empty.
pub fn seed_stats(samples: &[(f64, usize)]) -> Option<SeedStats> {
    if samples.is_empty() {
        return None;
    }
    let k = samples.len() as f64;
    let mean = samples.iter().map(|s| s.0).sum::<f64>() / k;
    let stderr = if samples.len() > 1 {
        let var = samples.iter().map(|s| (s.0 - mean).powi(2)).sum::<f64>() / (k - 1.0);
        (var / k).sqrt()
    } else {
        0.0
    };
    Some(SeedStats {
        accuracy: mean,
        stderr,
        n: samples[0].1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCell {
    /// `None` for baselines.
    pub trained_on: Option<String>,
    pub evaluated_on: String,
    pub regime: Regime,
    /// `None` marks an absent cell (a required checkpoint was missing).
    pub stats: Option<SeedStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixSpec {
    pub train_tasks: Vec<String>,
    pub eval_tasks: Vec<String>,
    pub regimes: Vec<Regime>,
    pub seeds: Vec<u64>,
}

/// Which policy a cell evaluates.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CellKey {
    pub trained_on: Option<String>,
    pub evaluated_on: String,
    pub regime: Regime,
}

/// The cells of a matrix, in output order: baselines once per evaluated
/// task; cross cells only off the diagonal.
pub fn matrix_cells(spec: &MatrixSpec) -> Vec<CellKey> {
    let mut out = Vec::new();
    for &regime in &spec.regimes {
        if regime.is_baseline() {
            for e in &spec.eval_tasks {
                out.push(CellKey {
                    trained_on: None,
                    evaluated_on: e.clone(),
                    regime,
                });
            }
            continue;
        }
        for t in &spec.train_tasks {
            for e in &spec.eval_tasks {
                if regime == Regime::CrossSelfRefine && t == e {
                    continue;
                }
                out.push(CellKey {
                    trained_on: Some(t.clone()),
                    evaluated_on: e.clone(),
                    regime,
                });
            }
        }
    }
    out
}

/// Fills the matrix. `accuracy(cell, seed)` returns `(accuracy, n)` or
/// `None` when the cell's checkpoint is missing; a cell missing for any seed
/// is absent and the run continues.
pub fn cross_matrix(
    spec: &MatrixSpec,
    mut accuracy: impl FnMut(&CellKey, u64) -> Option<(f64, usize)>,
) -> Vec<AccuracyCell> {
    matrix_cells(spec)
        .into_iter()
        .map(|key| {
            let samples: Option<Vec<(f64, usize)>> = spec.seeds.iter().map(|&s| accuracy(&key, s)).collect();
            if samples.is_none() {
                log::warn!(
                    "cell {} / {} / {} absent",
                    key.trained_on.as_deref().unwrap_or("-"),
                    key.evaluated_on,
                    key.regime.name()
                );
            }
            AccuracyCell {
                trained_on: key.trained_on,
                evaluated_on: key.evaluated_on,
                regime: key.regime,
                stats: samples.as_deref().and_then(seed_stats),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveRegime {
    /// Instruction-tuning only.
    ItOnly,
    /// Self-refinement applied directly to the base policy.
    RefineOnly,
    /// Instruction-tuning followed by self-refinement.
    ItRefine,
}

impl CurveRegime {
    pub const ALL: [CurveRegime; 3] = [CurveRegime::ItOnly, CurveRegime::RefineOnly, CurveRegime::ItRefine];

    pub fn name(self) -> &'static str {
        match self {
            CurveRegime::ItOnly => "it_only",
            CurveRegime::RefineOnly => "refine_only",
            CurveRegime::ItRefine => "it_refine",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub fraction: Fraction,
    pub regime: CurveRegime,
    pub stats: Option<SeedStats>,
}

/// Accuracy per `(fraction, regime)`, fractions outermost.
pub fn low_resource_curve(
    fractions: &[Fraction],
    regimes: &[CurveRegime],
    seeds: &[u64],
    mut accuracy: impl FnMut(Fraction, CurveRegime, u64) -> Option<(f64, usize)>,
) -> Vec<CurvePoint> {
    let mut out = Vec::with_capacity(fractions.len() * regimes.len());
    for &fraction in fractions {
        for &regime in regimes {
            let samples: Option<Vec<(f64, usize)>> = seeds.iter().map(|&s| accuracy(fraction, regime, s)).collect();
            out.push(CurvePoint {
                fraction,
                regime,
                stats: samples.as_deref().and_then(seed_stats),
            });
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Judge

const JUDGE_INSTRUCTIONS: &str = "Please act as an impartial judge and evaluate the quality of the response provided by an AI assistant to the user instruction displayed below. Your evaluation should consider factors such as quality, accuracy, depth, and level of detail. Begin your assessment with a short explanation. Be as objective as possible. After providing your explanation, please rate the response on a scale of 1 to 3 strictly following this format:\u{201c}[[rating]]\u{201d}, for example: \u{201c}Rating: [[2]]\u{201d}.";

/// The judge prompt with `question` and `response` filled in.
pub fn render_judge_prompt(question: &str, response: &str) -> String {
    format!("{JUDGE_INSTRUCTIONS}\n[question]\n{question}\n[AI assistant\u{2019}s response]\n{response}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub rating: u8,
    pub explanation: String,
}

/// Reads the last `[[n]]` with `n` in 1..=3; the text before it (minus a
/// trailing `Rating:`) is the explanation.
pub fn parse_verdict(reply: &str) -> Option<JudgeVerdict> {
    let mut found = None;
    let mut from = 0;
    while let Some(i) = reply[from..].find("[[") {
        let start = from + i;
        let rest = &reply[start + 2..];
        if let Some(end) = rest.find("]]") {
            if let Ok(n) = rest[..end].trim().parse::<u8>() {
                if (1..=3).contains(&n) {
                    found = Some((start, n));
                }
            }
        }
        from = start + 2;
    }
    let (start, rating) = found?;
    let before = reply[..start].trim_end();
    let before = before.strip_suffix("Rating:").unwrap_or(before);
    Some(JudgeVerdict {
        rating,
        explanation: before.trim().to_string(),
    })
}

/// Asks `client` to rate `response`, retrying once when the reply carries
/// no rating.
pub fn judge_quality(question: &str, response: &str, client: &dyn Completion) -> Result<JudgeVerdict> {
    let prompt = render_judge_prompt(question, response);
    let mut last = String::new();
    for _ in 0..2 {
        last = client.complete(&prompt)?;
        if let Some(v) = parse_verdict(&last) {
            return Ok(v);
        }
    }
    let shown: String = last.chars().take(120).collect();
    Err(Error::Judge(format!("no rating in reply after retry: {shown:?}")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct JudgeSummary {
    pub verdicts: Vec<Option<JudgeVerdict>>,
    /// Mean over parsed verdicts.
    pub mean_rating: Option<f64>,
    pub errors: usize,
}

/// Rates every `(question, response)`; failures are counted and excluded
/// from the mean.
pub fn judge_many(items: &[(String, String)], client: &dyn Completion) -> JudgeSummary {
    let verdicts: Vec<Option<JudgeVerdict>> = items
        .iter()
        .map(|(q, r)| match judge_quality(q, r, client) {
            Ok(v) => Some(v),
            Err(e) => {
                log::warn!("{e}");
                None
            }
        })
        .collect();
    let rated: Vec<f64> = verdicts.iter().flatten().map(|v| v.rating as f64).collect();
    JudgeSummary {
        mean_rating: (!rated.is_empty()).then(|| rated.iter().sum::<f64>() / rated.len() as f64),
        errors: verdicts.len() - rated.len(),
        verdicts,
    }
}

// ---------------------------------------------------------------------------
// Reports

pub const MATRIX_HEADER: [&str; 6] = ["trained_on", "evaluated_on", "regime", "accuracy", "stderr", "n"];
pub const CURVE_HEADER: [&str; 4] = ["fraction", "regime", "accuracy", "stderr"];
pub const RECORD_HEADER: [&str; 7] = ["demo_id", "prompt_kind", "extracted", "target", "correct", "error", "generated"];

#[derive(Debug, Clone, Copy, Default)]
pub struct Report<'a> {
    pub matrix: &'a [AccuracyCell],
    pub curve: &'a [CurvePoint],
    pub records: &'a [EvalRecord],
}

/// Writes `matrix.csv`, `curve.csv`, `records.csv` and, for non-empty
/// tables, `matrix.svg` and `curve.svg`. Returns the files written.
pub fn emit_report(report: &Report<'_>, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();

    let path = out_dir.join("matrix.csv");
    let rows = report.matrix.iter().map(|c| {
        let (acc, se, n) = fmt_stats(c.stats);
        vec![
            c.trained_on.clone().unwrap_or_else(|| "-".into()),
            c.evaluated_on.clone(),
            c.regime.name().to_string(),
            acc,
            se,
            n,
        ]
    });
    write_csv(&path, &MATRIX_HEADER, rows)?;
    written.push(path);
    if report.matrix.is_empty() {
        log::warn!("no matrix cells; matrix.csv holds only its header");
    } else {
        let path = out_dir.join("matrix.svg");
        write_file(&path, &matrix_svg(report.matrix))?;
        written.push(path);
    }

    let path = out_dir.join("curve.csv");
    let rows = report.curve.iter().map(|p| {
        let (acc, se, _) = fmt_stats(p.stats);
        vec![p.fraction.to_string(), p.regime.name().to_string(), acc, se]
    });
    write_csv(&path, &CURVE_HEADER, rows)?;
    written.push(path);
    if report.curve.is_empty() {
        log::warn!("no curve points; curve.csv holds only its header");
    } else {
        let path = out_dir.join("curve.svg");
        write_file(&path, &curve_svg(report.curve))?;
        written.push(path);
    }

    let path = out_dir.join("records.csv");
    let rows = report.records.iter().map(|r| {
        vec![
            r.demo_id.clone(),
            match r.prompt_kind {
                PromptKind::Standard => "standard".into(),
                PromptKind::Cot => "cot".into(),
            },
            r.extracted.clone().unwrap_or_default(),
            r.target.clone(),
            r.correct.to_string(),
            r.error.clone().unwrap_or_default(),
            r.generated.clone(),
        ]
    });
    write_csv(&path, &RECORD_HEADER, rows)?;
    written.push(path);
    if report.records.is_empty() {
        log::warn!("no evaluation records; records.csv holds only its header");
    }
    Ok(written)
}

fn fmt_stats(s: Option<SeedStats>) -> (String, String, String) {
    match s {
        Some(s) => (format!("{:.2}", s.accuracy), format!("{:.2}", s.stderr), s.n.to_string()),
        None => (String::new(), String::new(), String::new()),
    }
}

fn write_csv(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

const PALETTE: [&str; 5] = ["#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2"];

fn svg_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Grouped bars: one group per (trained_on, evaluated_on), one bar per
/// regime, y axis 0..100 %.
fn matrix_svg(cells: &[AccuracyCell]) -> String {
    let mut groups: Vec<(String, String)> = Vec::new();
    let mut regimes: Vec<Regime> = Vec::new();
    for c in cells {
        let g = (c.trained_on.clone().unwrap_or_else(|| "-".into()), c.evaluated_on.clone());
        if !groups.contains(&g) {
            groups.push(g);
        }
        if !regimes.contains(&c.regime) {
            regimes.push(c.regime);
        }
    }
    let bar = 14.0;
    let group_w = bar * regimes.len() as f64 + 20.0;
    let (left, top, plot_h) = (50.0, 20.0, 200.0);
    let width = left + group_w * groups.len() as f64 + 20.0;
    let height = top + plot_h + 60.0 + 16.0 * regimes.len() as f64;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="10">"#);
    axis(&mut s, left, top, plot_h, width - 20.0);
    for c in cells {
        let Some(st) = c.stats else { continue };
        let g = groups
            .iter()
            .position(|g| g.0 == c.trained_on.clone().unwrap_or_else(|| "-".into()) && g.1 == c.evaluated_on)
            .expect("group");
        let r = regimes.iter().position(|&r| r == c.regime).expect("regime");
        let x = left + 10.0 + g as f64 * group_w + r as f64 * bar;
        let h = plot_h * st.accuracy.clamp(0.0, 100.0) / 100.0;
        let _ = writeln!(
            s,
            r#"<rect x="{x:.1}" y="{:.1}" width="{:.1}" height="{h:.1}" fill="{}"/>"#,
            top + plot_h - h,
            bar - 2.0,
            PALETTE[r % PALETTE.len()]
        );
    }
    for (i, (t, e)) in groups.iter().enumerate() {
        let x = left + 10.0 + i as f64 * group_w;
        let _ = writeln!(s, r#"<text x="{x:.1}" y="{:.1}">{}</text>"#, top + plot_h + 14.0, svg_escape(&format!("{t}→{e}")));
    }
    legend(&mut s, left, top + plot_h + 34.0, regimes.iter().map(|r| r.name()));
    s.push_str("</svg>\n");
    s
}

/// Accuracy against data fraction, one line per regime.
fn curve_svg(points: &[CurvePoint]) -> String {
    let mut regimes: Vec<CurveRegime> = points.iter().map(|p| p.regime).collect();
    regimes.sort();
    regimes.dedup();
    let (left, top, plot_h, plot_w) = (50.0, 20.0, 200.0, 300.0);
    let height = top + plot_h + 40.0 + 16.0 * regimes.len() as f64;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{height}" font-family="sans-serif" font-size="10">"#, left + plot_w + 30.0);
    axis(&mut s, left, top, plot_h, left + plot_w);
    let x_of = |f: f64| left + plot_w * f;
    for f in Fraction::ALL {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, x_of(f.value()), top + plot_h + 14.0, f);
    }
    for (i, r) in regimes.iter().enumerate() {
        let mut pts: Vec<(f64, f64)> = points
            .iter()
            .filter(|p| p.regime == *r)
            .filter_map(|p| p.stats.map(|st| (p.fraction.value(), st.accuracy)))
            .collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let path: Vec<String> = pts
            .iter()
            .map(|(f, a)| format!("{:.1},{:.1}", x_of(*f), top + plot_h - plot_h * a.clamp(0.0, 100.0) / 100.0))
            .collect();
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, path.join(" "));
    }
    legend(&mut s, left, top + plot_h + 30.0, regimes.iter().map(|r| r.name()));
    s.push_str("</svg>\n");
    s
}

fn axis(s: &mut String, left: f64, top: f64, plot_h: f64, right: f64) {
    let bottom = top + plot_h;
    let _ = writeln!(s, r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}" stroke="black"/>"#);
    for tick in [0, 25, 50, 75, 100] {
        let y = bottom - plot_h * tick as f64 / 100.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{tick}%</text>"#, left - 4.0, y + 3.0);
    }
}

fn legend<'a>(s: &mut String, x: f64, y: f64, names: impl Iterator<Item = &'a str>) {
    for (i, name) in names.enumerate() {
        let yy = y + 16.0 * i as f64;
        let _ = writeln!(s, r#"<rect x="{x}" y="{:.1}" width="10" height="10" fill="{}"/>"#, yy - 9.0, PALETTE[i % PALETTE.len()]);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{yy:.1}">{name}</text>"#, x + 14.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Theme;

    #[test]
    fn extraction_examples() {
        let mc = TaskSpec::multiple_choice("t", 4, Theme::Category);
        assert_eq!(
            extract_answer("the only substance among the options that can be shaped is A) Ice.", &mc).as_deref(),
            Some("A")
        );
        assert_eq!(extract_answer("Answer: B) steam", &mc).as_deref(), Some("B"));
        assert_eq!(extract_answer("I considered A and B; final answer: B", &mc).as_deref(), Some("B"));
        assert_eq!(extract_answer("no idea", &mc), None);
        let num = TaskSpec::numeric("n");
        assert_eq!(extract_answer("3+8=11\nThe answer is 11.", &num).as_deref(), Some("11"));
    }

    #[test]
    fn correctness_normalizes() {
        let space = AnswerSpace::labels(4);
        assert!(is_correct(Some("b"), "B", &space));
        assert!(!is_correct(Some("E"), "A", &space));
        assert!(!is_correct(None, "A", &space));
        assert!(is_correct(Some("11.0"), "11", &AnswerSpace::Numeric));
    }

    #[test]
    fn well_formed_needs_two_lines_before_answer() {
        let space = AnswerSpace::labels(4);
        assert!(is_well_formed_cot("A) x: y\nB) z: w\nSo the answer is A) x.", &space));
        assert!(!is_well_formed_cot("A) x: y\nSo the answer is A) x.", &space));
        assert!(!is_well_formed_cot("nothing\nat\nall", &space));
    }

    #[test]
    fn verdict_parsing() {
        assert_eq!(parse_verdict("Thorough and correct. Rating: [[2]]").unwrap().rating, 2);
        let v = parse_verdict("I'd say [[3]] overall, really.").unwrap();
        assert_eq!(v.rating, 3);
        assert!(parse_verdict("Rating: 2").is_none());
        assert!(parse_verdict("Rating: [[7]]").is_none());
        assert_eq!(parse_verdict("Good. Rating: [[1]]").unwrap().explanation, "Good.");
    }

    #[test]
    fn judge_prompt_substitutes_both_fields() {
        let p = render_judge_prompt("Q?", "R!");
        assert!(p.starts_with("Please act as an impartial judge"));
        assert!(p.ends_with("[question]\nQ?\n[AI assistant\u{2019}s response]\nR!"));
        assert!(p.contains("\u{201c}Rating: [[2]]\u{201d}"));
    }

    #[test]
    fn stats_over_seeds() {
        let s = seed_stats(&[(50.0, 10), (60.0, 10)]).unwrap();
        assert_eq!(s.accuracy, 55.0);
        assert!((s.stderr - 5.0).abs() < 1e-12);
        assert_eq!(seed_stats(&[(40.0, 3)]).unwrap().stderr, 0.0);
        assert!(seed_stats(&[]).is_none());
    }
}
