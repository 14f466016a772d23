mod common;

use std::path::Path;

use selfrefine::answer::AnswerSpace;
use selfrefine::corpus::{Demonstration, Fraction, TaskSpec, Theme};
use selfrefine::eval::*;
use selfrefine::policy::{GenerationConfig, LanguageModel, Policy, TokenId, Vocabulary, EOS, SEP};
use selfrefine::teacher::Completion;
use serde::Deserialize;

#[derive(Deserialize)]
struct Fixture {
    text: String,
    space: String,
    target: String,
    extracted: Option<String>,
    correct: bool,
}

fn space_of(name: &str) -> AnswerSpace {
    match name {
        "mc4" => AnswerSpace::labels(4),
        "mc5" => AnswerSpace::labels(5),
        "numeric" => AnswerSpace::Numeric,
        other => panic!("unknown space {other}"),
    }
}

fn task_of(name: &str) -> TaskSpec {
    match name {
        "mc4" => TaskSpec::multiple_choice("t", 4, Theme::Category),
        "mc5" => TaskSpec::multiple_choice("t", 5, Theme::Category),
        _ => TaskSpec::numeric("n"),
    }
}

fn fixtures() -> Vec<Fixture> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/extraction_cases.jsonl");
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn hand_labeled_fixtures_agree() {
    let cases = fixtures();
    assert_eq!(cases.len(), 30);
    for (i, c) in cases.iter().enumerate() {
        let got = extract_answer(&c.text, &task_of(&c.space));
        assert_eq!(got, c.extracted, "case {i}: {:?}", c.text);
        assert_eq!(is_correct(got.as_deref(), &c.target, &space_of(&c.space)), c.correct, "case {i}");
    }
}

#[test]
fn extraction_ignores_trailing_whitespace_and_label_case() {
    let task = task_of("mc4");
    for c in fixtures().iter().filter(|c| c.space == "mc4") {
        let padded = format!("{}  \n\t", c.text);
        assert_eq!(extract_answer(&padded, &task), c.extracted);
        let lower = c.text.replace("A)", "a)").replace("B)", "b)").replace("C)", "c)").replace("D)", "d)");
        assert_eq!(extract_answer(&lower, &task), c.extracted, "{lower:?}");
    }
}

/// Emits one token drawn from `first` after `<sep>`, then `<eos>`.
struct LabelPolicy {
    vocab: Vocabulary,
    first: Vec<f64>,
}

impl LabelPolicy {
    /// Vocabulary: specials then `A)`..`E)`.
    fn new(weights: [f64; 5]) -> Self {
        let mut tokens: Vec<String> = selfrefine::policy::vocab::SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(["A)", "B)", "C)", "D)", "E)"].map(String::from));
        let total: f64 = weights.iter().sum();
        let mut first = vec![f64::NEG_INFINITY; tokens.len()];
        for (i, w) in weights.iter().enumerate() {
            if *w > 0.0 {
                first[5 + i] = (w / total).ln();
            }
        }
        LabelPolicy {
            vocab: Vocabulary::new(tokens).unwrap(),
            first,
        }
    }
}

impl LanguageModel for LabelPolicy {
    type State = bool;

    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn context_length(&self) -> usize {
        4096
    }

    fn start(&self) -> bool {
        false
    }

    fn feed(&self, answering: &mut bool, token: TokenId) -> selfrefine::Result<Vec<f64>> {
        let n = self.vocab.len();
        if *answering {
            let mut out = vec![f64::NEG_INFINITY; n];
            out[EOS as usize] = 0.0;
            return Ok(out);
        }
        if token == SEP {
            *answering = true;
            return Ok(self.first.clone());
        }
        Ok(vec![-(n as f64).ln(); n])
    }
}

impl Policy for LabelPolicy {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }
}

fn demos(n: usize, target: impl Fn(usize) -> String) -> Vec<Demonstration> {
    let mut out = common::oracle_demos(n, 77);
    for (i, d) in out.iter_mut().enumerate() {
        d.target = target(i);
    }
    out
}

fn greedy() -> GenerationConfig {
    GenerationConfig {
        temperature: 0.0,
        max_new_tokens: 4,
        seed: 1,
    }
}

#[test]
fn always_right_scores_100() {
    let ds = demos(40, |_| "C".into());
    let e = evaluate(&LabelPolicy::new([0.0, 0.0, 1.0, 0.0, 0.0]), &ds, PromptKind::Standard, &greedy(), 2);
    assert_eq!(e.accuracy(), 100.0);
    assert_eq!(e.extraction_misses, 0);
    assert!(e.records.iter().all(|r| r.generated == "C)" && r.correct));
}

#[test]
fn out_of_space_label_scores_0_with_all_misses() {
    let ds = demos(40, |i| ["A", "B", "C", "D"][i % 4].into());
    let e = evaluate(&LabelPolicy::new([0.0, 0.0, 0.0, 0.0, 1.0]), &ds, PromptKind::Cot, &greedy(), 1);
    assert_eq!(e.accuracy(), 0.0);
    assert_eq!(e.extraction_misses, ds.len());
    assert_eq!(e.generation_errors, 0);
}

#[test]
fn random_labels_score_near_chance() {
    let n = 1000;
    let ds = demos(n, |i| ["A", "B", "C", "D"][(i * 7 + i / 3) % 4].into());
    let cfg = GenerationConfig {
        temperature: 1.0,
        max_new_tokens: 4,
        seed: 5,
    };
    let e = evaluate(&LabelPolicy::new([1.0, 1.0, 1.0, 1.0, 0.0]), &ds, PromptKind::Standard, &cfg, 1);
    let sigma = 100.0 * (0.25f64 * 0.75 / n as f64).sqrt();
    assert!((e.accuracy() - 25.0).abs() <= 3.0 * sigma, "{} (sigma {sigma})", e.accuracy());
    // accuracy is exactly the mean of the correct flags
    let flags = e.records.iter().filter(|r| r.correct).count() as f64 / n as f64;
    assert_eq!(e.accuracy(), 100.0 * flags);
}

#[test]
fn evaluation_is_repeatable_and_order_free() {
    let ds = demos(60, |i| ["A", "B", "C", "D"][i % 4].into());
    let policy = LabelPolicy::new([1.0, 2.0, 3.0, 4.0, 0.0]);
    let cfg = GenerationConfig {
        temperature: 1.0,
        max_new_tokens: 4,
        seed: 9,
    };
    let a = evaluate(&policy, &ds, PromptKind::Cot, &cfg, 1);
    let b = evaluate(&policy, &ds, PromptKind::Cot, &cfg, 4);
    assert_eq!(a.records, b.records);
    let rev: Vec<Demonstration> = ds.iter().rev().cloned().collect();
    let c = evaluate(&policy, &rev, PromptKind::Cot, &cfg, 1);
    let mut c_records = c.records.clone();
    c_records.reverse();
    assert_eq!(a.records, c_records);
}

#[test]
fn generation_errors_are_recorded_and_count_as_wrong() {
    let ds = demos(5, |_| "A".into());
    let policy = common::text_policy(&ds, 1);
    let mut arch = policy.arch().clone();
    arch.context_length = 8;
    let small = selfrefine::policy::PolicyModel::init(arch, policy.vocab().clone(), 1).unwrap();
    let e = evaluate(&small, &ds, PromptKind::Standard, &greedy(), 1);
    assert_eq!(e.generation_errors, 5);
    assert_eq!(e.accuracy(), 0.0);
    assert!(e.records.iter().all(|r| r.error.is_some() && !r.correct));
}

fn spec2() -> MatrixSpec {
    MatrixSpec {
        train_tasks: vec!["qa".into(), "math".into()],
        eval_tasks: vec!["qa".into(), "math".into()],
        regimes: vec![Regime::InstructionTuning, Regime::SelfRefine, Regime::CrossSelfRefine],
        seeds: vec![1, 2, 3],
    }
}

fn fake_accuracy(key: &CellKey, seed: u64) -> Option<(f64, usize)> {
    let t = key.trained_on.as_deref().map_or(0, str::len) as f64;
    Some((10.0 * t + key.evaluated_on.len() as f64 + seed as f64, 500))
}

#[test]
fn matrix_grid_arithmetic() {
    let cells = cross_matrix(&spec2(), fake_accuracy);
    // 2 x 2 for each of IT and self-refine, cross without its diagonal
    assert_eq!(cells.len(), 4 + 4 + 2);
    assert!(cells
        .iter()
        .filter(|c| c.regime == Regime::CrossSelfRefine)
        .all(|c| c.trained_on.as_deref() != Some(c.evaluated_on.as_str())));

    let mut spec = spec2();
    spec.regimes = vec![Regime::Baseline];
    let base = cross_matrix(&spec, fake_accuracy);
    assert_eq!(base.len(), 2);
    assert!(base.iter().all(|c| c.trained_on.is_none()));
}

#[test]
fn matrix_stats_are_mean_and_stderr_over_seeds() {
    let cells = cross_matrix(&spec2(), fake_accuracy);
    let c = &cells[0];
    let st = c.stats.unwrap();
    // seeds 1, 2, 3 shift the accuracy by +1, +2, +3
    let base = 10.0 * c.trained_on.as_ref().unwrap().len() as f64 + c.evaluated_on.len() as f64;
    assert!((st.accuracy - (base + 2.0)).abs() < 1e-12);
    assert!((st.stderr - (1.0f64 / 3.0).sqrt()).abs() < 1e-12);
    assert_eq!(st.n, 500);
    assert_eq!(cross_matrix(&spec2(), fake_accuracy), cells);
}

#[test]
fn missing_checkpoints_leave_cells_absent() {
    let cells = cross_matrix(&spec2(), |k, s| {
        if k.regime == Regime::SelfRefine && k.trained_on.as_deref() == Some("math") && s == 2 {
            None
        } else {
            fake_accuracy(k, s)
        }
    });
    assert_eq!(cells.len(), 10);
    assert_eq!(cells.iter().filter(|c| c.stats.is_none()).count(), 2);
}

#[test]
fn curve_has_a_cell_per_fraction_and_regime() {
    let points = low_resource_curve(&Fraction::ALL, &CurveRegime::ALL, &[0, 1], |f, r, s| {
        Some((f.value() * 50.0 + r as u8 as f64 + s as f64, 100))
    });
    assert_eq!(points.len(), 12);
    assert_eq!(points[0].fraction, Fraction::Full);
    assert_eq!(points[0].regime, CurveRegime::ItOnly);
}

#[test]
fn report_files_are_deterministic() {
    let cells: Vec<AccuracyCell> = cross_matrix(
        &MatrixSpec {
            train_tasks: vec!["qa".into(), "math".into()],
            eval_tasks: vec!["qa".into(), "math".into()],
            regimes: vec![Regime::InstructionTuning, Regime::SelfRefine, Regime::CrossSelfRefine],
            seeds: vec![0],
        },
        fake_accuracy,
    );
    let mut cells12 = cells.clone();
    cells12.extend(cells.iter().take(2).cloned());
    let points = low_resource_curve(&Fraction::ALL, &CurveRegime::ALL, &[0], |f, _, _| Some((f.value() * 80.0, 50)));
    let dir = tempfile::tempdir().unwrap();
    let report = Report {
        matrix: &cells12,
        curve: &points,
        records: &[],
    };
    let a = emit_report(&report, &dir.path().join("a")).unwrap();
    let b = emit_report(&report, &dir.path().join("b")).unwrap();
    let names: Vec<String> = a.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    assert_eq!(names, ["matrix.csv", "matrix.svg", "curve.csv", "curve.svg", "records.csv"]);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap(), "{}", x.display());
    }
    let matrix = std::fs::read_to_string(&a[0]).unwrap();
    let lines: Vec<&str> = matrix.lines().collect();
    assert_eq!(lines.len(), 13);
    assert_eq!(lines[0], "trained_on,evaluated_on,regime,accuracy,stderr,n");
    let curve = std::fs::read_to_string(&a[2]).unwrap();
    assert_eq!(curve.lines().next(), Some("fraction,regime,accuracy,stderr"));
    assert_eq!(curve.lines().count(), 13);
}

#[test]
fn empty_report_is_header_only_without_charts() {
    let dir = tempfile::tempdir().unwrap();
    let files = emit_report(&Report::default(), dir.path()).unwrap();
    assert!(files.iter().all(|f| f.extension().unwrap() == "csv"));
    let matrix = std::fs::read_to_string(dir.path().join("matrix.csv")).unwrap();
    assert_eq!(matrix, "trained_on,evaluated_on,regime,accuracy,stderr,n\n");
    assert!(!dir.path().join("matrix.svg").exists());
}

/// Replies from a fixed list, one per call.
struct Replies {
    replies: Vec<&'static str>,
    calls: std::sync::atomic::AtomicUsize,
}

impl Replies {
    fn new(replies: Vec<&'static str>) -> Self {
        Replies {
            replies,
            calls: Default::default(),
        }
    }

    fn calls(&self) -> usize {
        self.calls.load(std::sync::atomic::Ordering::SeqCst)
    }
}

impl Completion for Replies {
    fn complete(&self, prompt: &str) -> selfrefine::Result<String> {
        assert!(prompt.contains("[question]"));
        let i = self.calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
        Ok(self.replies[i.min(self.replies.len() - 1)].to_string())
    }
}

#[test]
fn judge_reads_rating() {
    let c = Replies::new(vec!["The response is accurate and thorough. Rating: [[2]]"]);
    let v = judge_quality("q", "r", &c).unwrap();
    assert_eq!(v.rating, 2);
    assert_eq!(v.explanation, "The response is accurate and thorough.");
    let c = Replies::new(vec!["Overall I would give it [[3]] because it is complete."]);
    assert_eq!(judge_quality("q", "r", &c).unwrap().rating, 3);
}

#[test]
fn judge_retries_once_then_errors() {
    let c = Replies::new(vec!["no verdict", "Rating: [[1]]"]);
    assert_eq!(judge_quality("q", "r", &c).unwrap().rating, 1);
    assert_eq!(c.calls(), 2);
    let c = Replies::new(vec!["no verdict"]);
    assert!(matches!(judge_quality("q", "r", &c), Err(selfrefine::Error::Judge(_))));
    assert_eq!(c.calls(), 2);
}

#[test]
fn judge_summary_excludes_failures() {
    let c = Replies::new(vec!["Rating: [[3]]", "nothing", "nothing", "Rating: [[1]]"]);
    let items: Vec<(String, String)> = (0..3).map(|i| (format!("q{i}"), format!("r{i}"))).collect();
    let s = judge_many(&items, &c);
    assert_eq!(s.errors, 1);
    assert_eq!(s.mean_rating, Some(2.0));
    assert_eq!(s.verdicts.len(), 3);
}

#[test]
fn judge_prompt_is_rendered_verbatim() {
    let p = render_judge_prompt("What is 2+2?", "4");
    let expected = "Please act as an impartial judge and evaluate the quality of the response provided by an AI assistant to the user instruction displayed below. Your evaluation should consider factors such as quality, accuracy, depth, and level of detail. Begin your assessment with a short explanation. Be as objective as possible. After providing your explanation, please rate the response on a scale of 1 to 3 strictly following this format:\u{201c}[[rating]]\u{201d}, for example: \u{201c}Rating: [[2]]\u{201d}.\n[question]\nWhat is 2+2?\n[AI assistant\u{2019}s response]\n4";
    assert_eq!(p, expected);
    // placeholders inside the inputs are not expanded
    let q = render_judge_prompt("${response}", "x");
    assert!(q.contains("[question]\n${response}\n"));
}
