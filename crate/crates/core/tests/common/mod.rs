#![allow(dead_code)]

use selfrefine::policy::{Arch, PolicyModel, TokenId, Vocabulary};

/// `<pad> <bos> <eos> <sep> <unk> a b c`: eight tokens.
pub fn toy_vocab() -> Vocabulary {
    let mut t: Vec<String> = selfrefine::policy::vocab::SPECIALS
        .iter()
        .map(|s| s.to_string())
        .collect();
    t.extend(["a", "b", "c"].map(String::from));
    Vocabulary::new(t).unwrap()
}

pub fn toy_arch() -> Arch {
    Arch {
        layers: 2,
        width: 4,
        heads: 2,
        context_length: 12,
        mlp_hidden: Some(8),
    }
}

/// A 2-layer policy with fewer than 500 parameters.
pub fn toy_policy(seed: u64) -> PolicyModel {
    let mut p = PolicyModel::init(toy_arch(), toy_vocab(), seed).unwrap();
    // perturb gains and biases away from 1/0 so every parameter matters
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    for v in p.params_mut() {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let u = ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5;
        *v = (*v + 0.2 * u) as f32 as f64;
    }
    assert!(p.param_count() <= 500, "{} params", p.param_count());
    p
}

pub fn ids(vocab: &Vocabulary, text: &str) -> Vec<TokenId> {
    vocab.encode(text).ids
}

/// Three-point central differences of `f` with step `h`, one coordinate at a
/// time. Truncation error is O(h^2).
pub fn central_differences(
    model: &PolicyModel,
    h: f64,
    f: impl Fn(&PolicyModel) -> f64,
) -> Vec<f64> {
    let mut probe = model.clone();
    (0..model.param_count())
        .map(|i| {
            let x = model.params()[i];
            let mut at = |d: f64| {
                probe.params_mut()[i] = x + d;
                f(&probe)
            };
            let g = (at(h) - at(-h)) / (2.0 * h);
            probe.params_mut()[i] = x;
            g
        })
        .collect()
}

/// Five-point central differences with step `h`; truncation error O(h^4).
pub fn central_differences5(
    model: &PolicyModel,
    h: f64,
    f: impl Fn(&PolicyModel) -> f64,
) -> Vec<f64> {
    let mut probe = model.clone();
    (0..model.param_count())
        .map(|i| {
            let x = model.params()[i];
            let mut at = |d: f64| {
                probe.params_mut()[i] = x + d;
                f(&probe)
            };
            let g = (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h);
            probe.params_mut()[i] = x;
            g
        })
        .collect()
}

/// `|a - n| / max(|a|, |n|, floor)` per coordinate; the floor keeps
/// coordinates whose true gradient is zero from dividing noise by noise.
pub fn relative_errors(analytic: &[f64], numeric: &[f64], floor: f64) -> Vec<f64> {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .collect()
}

pub fn max_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(0.0, f64::max)
}

/// `n` oracle-annotated multiple-choice demonstrations.
pub fn oracle_demos(n: usize, seed: u64) -> Vec<selfrefine::corpus::Demonstration> {
    use selfrefine::corpus::{gen_synthetic_tasks, skeletons, TaskSpec, Theme};
    use selfrefine::teacher::{build_demonstrations, BuildOptions, OracleTeacher};
    let spec = TaskSpec::multiple_choice("toy", 4, Theme::Category);
    let sk = skeletons(&spec, &gen_synthetic_tasks(&spec, n, seed).unwrap());
    build_demonstrations(&sk, &OracleTeacher, &BuildOptions::default())
        .unwrap()
        .demonstrations
}

/// A one-layer policy whose vocabulary covers `demos`.
pub fn text_policy(demos: &[selfrefine::corpus::Demonstration], seed: u64) -> PolicyModel {
    use selfrefine::corpus::render_prompt;
    let mut texts = Vec::new();
    for d in demos {
        texts.push(render_prompt(d, true));
        texts.push(d.teacher_answer.clone());
        texts.push(d.teacher_cot_answer.clone());
    }
    let vocab = Vocabulary::build(texts.iter().map(String::as_str), 200).unwrap();
    let arch = Arch {
        layers: 1,
        width: 16,
        heads: 2,
        context_length: 128,
        mlp_hidden: Some(32),
    };
    PolicyModel::init(arch, vocab, seed).unwrap()
}

/// One cell of the pair-builder truth table: whether the CoT sample and the
/// plain sample commit to the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Case {
    pub cot_correct: bool,
    pub plain_correct: bool,
}

pub const CASES: [Case; 4] = [
    Case { cot_correct: true, plain_correct: true },
    Case { cot_correct: true, plain_correct: false },
    Case { cot_correct: false, plain_correct: true },
    Case { cot_correct: false, plain_correct: false },
];

/// Samples for `demo` realizing `case`; `wrong` picks the incorrect label.
pub fn case_samples(
    demo: &selfrefine::corpus::Demonstration,
    case: Case,
    wrong: usize,
) -> selfrefine::refine::SampledResponses {
    let choices = demo.choices.as_ref().expect("multiple choice");
    let others: Vec<&selfrefine::corpus::Choice> = choices.iter().filter(|c| c.label != demo.target).collect();
    let bad = others[wrong % others.len()];
    let good = choices.iter().find(|c| c.label == demo.target).unwrap();
    let pick = |ok: bool| if ok { good } else { bad };
    let c = pick(case.cot_correct);
    selfrefine::refine::SampledResponses {
        demo_id: demo.id.clone(),
        sample_index: 0,
        y: pick(case.plain_correct).label.clone(),
        y_cot: format!("Let me look at each option.\n{}) {} fits.\nSo the answer is {}) {}.", c.label, c.text, c.label, c.text),
    }
}

/// Expected pair by direct case analysis: `(prompt, chosen, rejected,
/// provenance, rejected_correct)`, or `None` when chosen equals rejected.
pub fn expected_pair(
    variant: selfrefine::refine::Variant,
    demo: &selfrefine::corpus::Demonstration,
    s: &selfrefine::refine::SampledResponses,
    case: Case,
) -> Option<(String, String, String, selfrefine::refine::Provenance, bool)> {
    use selfrefine::corpus::render_prompt;
    use selfrefine::refine::{Provenance, Variant};
    let out = match variant {
        Variant::Cot => {
            let (chosen, prov) = if case.cot_correct {
                (s.y_cot.clone(), Provenance::SelfCot)
            } else {
                (demo.teacher_cot_answer.clone(), Provenance::TeacherDemo)
            };
            (render_prompt(demo, true), chosen, s.y.clone(), prov, case.plain_correct)
        }
        Variant::Answer => {
            let (chosen, prov) = if case.plain_correct {
                (s.y.clone(), Provenance::SelfAnswer)
            } else {
                (demo.teacher_answer.clone(), Provenance::TeacherDemo)
            };
            (render_prompt(demo, false), chosen, s.y_cot.clone(), prov, case.cot_correct)
        }
    };
    (out.1 != out.2).then_some(out)
}
