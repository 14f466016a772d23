//! Acceptance suite: one PASS/FAIL line per criterion. Runs without the
//! libtest harness so the lines are always printed; exits non-zero when any
//! criterion fails.

mod common;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use selfrefine::answer::AnswerSpace;
use selfrefine::corpus::{make_splits, Fraction, TaskSpec, Theme};
use selfrefine::eval::{extract_answer, is_correct};
use selfrefine::instruct::{example_loss, example_loss_grad, lr_at, Example, InstructConfig};
use selfrefine::pipeline::{run_seed, RunConfig, SeedResult};
use selfrefine::policy::{BOS, EOS, SEP};
use selfrefine::refine::*;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// -- 1 ------------------------------------------------------------------------

fn dpo_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let policy = toy_policy(11);
    let text = |rng: &mut ChaCha8Rng| -> String {
        let n = rng.gen_range(1..=3);
        (0..n).map(|_| ['a', 'b', 'c'][rng.gen_range(0..3)]).collect()
    };
    let mut pairs = Vec::new();
    while pairs.len() < 100 {
        let (chosen, rejected) = (text(&mut rng), text(&mut rng));
        if chosen == rejected {
            continue;
        }
        let pair = PreferencePair {
            demo_id: format!("p{}", pairs.len()),
            prompt: text(&mut rng),
            chosen,
            rejected,
            chosen_provenance: Provenance::SelfCot,
            rejected_correct: false,
        };
        pairs.push(encode_pair(&policy, &pair).map_err(|e| e.to_string())?);
    }
    let mut worst = 0.0f64;
    for beta in [0.01, 0.1, 1.0] {
        for p in &pairs {
            let loss = dpo_loss(&policy, &policy, std::slice::from_ref(p), beta).map_err(|e| e.to_string())?;
            worst = worst.max((loss - std::f64::consts::LN_2).abs());
        }
    }
    check(worst <= 1e-9, format!("300 pair losses, max |loss - ln 2| = {worst:.1e} (tol 1e-9)"))
}

// -- 2 ------------------------------------------------------------------------

fn gradient_oracles() -> Outcome {
    let mut worst_dpo = 0.0f64;
    let mut params = 0;
    for k in 0..3u64 {
        let policy = toy_policy(300 + k);
        params = policy.param_count();
        let reference = toy_policy(400 + k);
        let mut rng = ChaCha8Rng::seed_from_u64(50 + k);
        let mut pairs = Vec::new();
        while pairs.len() < 3 {
            let t = |rng: &mut ChaCha8Rng| -> String {
                let n = rng.gen_range(1..=3);
                (0..n).map(|_| ['a', 'b', 'c'][rng.gen_range(0..3)]).collect()
            };
            let (chosen, rejected, prompt) = (t(&mut rng), t(&mut rng), t(&mut rng));
            if chosen != rejected {
                let pair = PreferencePair {
                    demo_id: format!("g{}", pairs.len()),
                    prompt,
                    chosen,
                    rejected,
                    chosen_provenance: Provenance::SelfCot,
                    rejected_correct: false,
                };
                pairs.push(encode_pair(&policy, &pair).unwrap());
            }
        }
        let refs: Vec<ReferenceLogProbs> = pairs.iter().map(|p| reference_log_probs(&reference, p).unwrap()).collect();
        let batch: Vec<(&EncodedPair, ReferenceLogProbs)> = pairs.iter().zip(refs).collect();
        let beta = [0.1, 0.5, 1.0][k as usize];
        let mut grad = vec![0.0; policy.param_count()];
        dpo_loss_grad(&policy, &batch, beta, &mut grad).unwrap();
        let numeric = central_differences5(&policy, 1e-3, |p| dpo_loss(p, &reference, &pairs, beta).unwrap());
        worst_dpo = worst_dpo.max(max_of(&relative_errors(&grad, &numeric, 1e-6)));
    }
    let (a, b, c) = (5, 6, 7);
    let examples = [
        Example { id: "e0".into(), prompt: vec![BOS, a, b, SEP], answer: vec![c, a, EOS] },
        Example { id: "e1".into(), prompt: vec![BOS, c, SEP], answer: vec![b, b, c, EOS] },
        Example { id: "e2".into(), prompt: vec![BOS, b, a, c, SEP], answer: vec![a, EOS] },
        Example { id: "e3".into(), prompt: vec![BOS, a, SEP], answer: vec![c, c, b, a, EOS] },
    ];
    let batches: [&[usize]; 3] = [&[0, 1], &[2, 3, 0], &[1, 3]];
    let mut worst_it = 0.0f64;
    for (k, idx) in batches.iter().enumerate() {
        let policy = toy_policy(200 + k as u64);
        let batch: Vec<&Example> = idx.iter().map(|&i| &examples[i]).collect();
        let mut grad = vec![0.0; policy.param_count()];
        example_loss_grad(&policy, &batch, &mut grad).unwrap();
        let numeric = central_differences5(&policy, 1e-3, |p| example_loss(p, &batch).unwrap());
        worst_it = worst_it.max(max_of(&relative_errors(&grad, &numeric, 1e-6)));
    }
    check(
        params <= 500 && worst_dpo <= 1e-4 && worst_it <= 1e-4,
        format!(
            "{params} params, 3 batches each, h = 1e-3 five-point central differences; worst relative error dpo {worst_dpo:.1e}, instruction {worst_it:.1e} (tol 1e-4)"
        ),
    )
}

// -- 3 ------------------------------------------------------------------------

fn truth_table() -> Outcome {
    let demos = oracle_demos(50, 21);
    let mut compared = 0;
    for variant in [Variant::Cot, Variant::Answer] {
        for case in CASES {
            let samples: Vec<SampledResponses> = demos.iter().enumerate().map(|(i, d)| case_samples(d, case, i)).collect();
            let set = build_pairs(variant, &demos, &samples).map_err(|e| e.to_string())?;
            let expected: Vec<_> = demos
                .iter()
                .zip(&samples)
                .filter_map(|(d, s)| expected_pair(variant, d, s, case))
                .collect();
            if set.pairs.len() != expected.len() || set.pairs.len() + set.dropped != samples.len() {
                return Err(format!("{variant:?} {case:?}: {} pairs, oracle {}", set.pairs.len(), expected.len()));
            }
            for (p, e) in set.pairs.iter().zip(&expected) {
                let got = (&p.prompt, &p.chosen, &p.rejected, p.chosen_provenance, p.rejected_correct);
                if got != (&e.0, &e.1, &e.2, e.3, e.4) {
                    return Err(format!("{variant:?} {case:?} {}: mismatch", p.demo_id));
                }
                compared += 1;
            }
        }
    }
    Ok(format!("2 variants x 4 cases x 50 demos: {compared} pairs identical to the case oracle"))
}

// -- 4 ------------------------------------------------------------------------

fn split_fidelity() -> Outcome {
    let demos = oracle_demos(3000, 4);
    let a = make_splits(&demos, 99);
    let b = make_splits(&demos, 99);
    let sizes: Vec<usize> = Fraction::ALL.iter().map(|f| a[f].member_ids.len()).collect();
    let nested = Fraction::ALL.windows(2).all(|w| {
        let big: BTreeSet<&String> = a[&w[0]].member_ids.iter().collect();
        a[&w[1]].member_ids.iter().all(|id| big.contains(id))
    });
    check(
        sizes == [3000, 2250, 1500, 750] && nested && a == b,
        format!("sizes {sizes:?}, nested {nested}, deterministic {}", a == b),
    )
}

// -- 5, 6 ---------------------------------------------------------------------

fn run_experiment() -> Result<Vec<SeedResult>, String> {
    let cfg = RunConfig::default();
    SEEDS
        .iter()
        .map(|&s| {
            let r = run_seed(&cfg, s, &Fraction::ALL).map_err(|e| format!("seed {s}: {e}"))?;
            let mut line = format!("    seed {s}: baseline {:5.1}", r.baseline.accuracy());
            for (f, x) in r.fractions.iter().rev() {
                line += &format!(
                    " | {f}: it {:5.1} it+refine {:5.1} refine-only {:5.1} wf {:.2}",
                    x.it.accuracy(),
                    x.it_refine.accuracy(),
                    x.refine_only.accuracy(),
                    x.it_refine.well_formed_fraction()
                );
            }
            println!("{line} ({:.0}s)", r.total_seconds);
            Ok(r)
        })
        .collect()
}

fn end_to_end_ordering(results: &[SeedResult]) -> Outcome {
    let mut baseline_ok = true;
    let mut it_ok = true;
    let mut wf_ok = true;
    let mut refine_ge_it = 0;
    let mut seconds = 0.0;
    let mut worst_wf = 1.0f64;
    for r in results {
        let full = &r.fractions[&Fraction::Full];
        baseline_ok &= (r.baseline.accuracy() - 25.0).abs() <= 10.0;
        it_ok &= full.it.accuracy() >= 60.0;
        worst_wf = worst_wf.min(full.it_refine.well_formed_fraction());
        wf_ok &= full.it_refine.well_formed_fraction() >= 0.9;
        if full.it_refine.accuracy() >= full.it.accuracy() {
            refine_ge_it += 1;
        }
        seconds += r.standard_seconds;
    }
    check(
        baseline_ok && it_ok && wf_ok && refine_ge_it >= 4 && seconds <= 900.0,
        format!(
            "baseline in 25±10: {baseline_ok}; IT >= 60%: {it_ok}; refine >= IT in {refine_ge_it}/5 seeds (need 4); min well-formed CoT {:.1}% (need 90%); runtime {seconds:.0}s (limit 900s)",
            100.0 * worst_wf
        ),
    )
}

fn low_resource(results: &[SeedResult], seconds: f64) -> Outcome {
    let mut good = 0;
    let mut notes = Vec::new();
    for r in results {
        let full = r.fractions[&Fraction::Full].it_refine.accuracy();
        let quarter = r.fractions[&Fraction::Quarter].it_refine.accuracy();
        let mut ok = full >= quarter;
        for (f, x) in &r.fractions {
            let (itr, ro, base) = (x.it_refine.accuracy(), x.refine_only.accuracy(), r.baseline.accuracy());
            if !(itr >= ro && ro >= base) {
                ok = false;
                notes.push(format!("seed {} at {f}: {itr:.1} / {ro:.1} / {base:.1}", r.seed));
            }
        }
        if full < quarter {
            notes.push(format!("seed {}: 1.00 {full:.1} < 0.25 {quarter:.1}", r.seed));
        }
        good += ok as usize;
    }
    let detail = format!(
        "ordering holds in {good}/5 seeds (need 4){}; runtime {seconds:.0}s (limit 1800s)",
        if notes.is_empty() { String::new() } else { format!("; violations: {}", notes.join(", ")) }
    );
    check(good >= 4 && seconds <= 1800.0, detail)
}

// -- 7 ------------------------------------------------------------------------

fn evaluator_fixtures() -> Outcome {
    #[derive(serde::Deserialize)]
    struct Case {
        text: String,
        space: String,
        target: String,
        extracted: Option<String>,
        correct: bool,
    }
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/extraction_cases.jsonl");
    let text = std::fs::read_to_string(&path).map_err(|e| e.to_string())?;
    let cases: Vec<Case> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let mut agree = 0;
    let mut misses = Vec::new();
    for (i, c) in cases.iter().enumerate() {
        let (task, space) = match c.space.as_str() {
            "mc4" => (TaskSpec::multiple_choice("t", 4, Theme::Category), AnswerSpace::labels(4)),
            "mc5" => (TaskSpec::multiple_choice("t", 5, Theme::Category), AnswerSpace::labels(5)),
            _ => (TaskSpec::numeric("n"), AnswerSpace::Numeric),
        };
        let got = extract_answer(&c.text, &task);
        if got == c.extracted && is_correct(got.as_deref(), &c.target, &space) == c.correct {
            agree += 1;
        } else {
            misses.push(i);
        }
    }
    check(
        agree == 30 && cases.len() == 30,
        format!("{agree}/{} hand-labeled cases agree{}", cases.len(), if misses.is_empty() { String::new() } else { format!("; disagreements {misses:?}") }),
    )
}

// -- 8 ------------------------------------------------------------------------

fn schedule_exactness() -> Outcome {
    let mut worst = 0.0f64;
    for (lr, total) in [(2e-5, 1000usize), (3e-3, 250), (1e-4, 37)] {
        let cfg = InstructConfig {
            learning_rate: lr,
            ..InstructConfig::paper()
        };
        let warmup = cfg.warmup_steps(total);
        worst = worst.max((lr_at(warmup, total, &cfg) - lr).abs());
        worst = worst.max(lr_at(total, total, &cfg).abs());
    }
    let paper = RefineConfig::paper();
    let ramp = (0..100).all(|s| paper.lr_at(s) < paper.learning_rate);
    let at_end = (paper.lr_at(100) - paper.learning_rate).abs();
    check(
        worst <= 1e-12 && ramp && at_end <= 1e-12 && paper.warmup_steps == 100,
        format!(
            "instruction schedule max error {worst:.1e} at warmup end / final step; preference warmup below lr for steps 0..99 and exact at step 100 ({at_end:.1e})"
        ),
    )
}

fn main() {
    let mut failed = 0;
    let mut report = |id: u32, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS {id} {name}: {d} [{secs:.1}s]"),
            Err(d) => {
                failed += 1;
                println!("FAIL {id} {name}: {d} [{secs:.1}s]");
            }
        }
    };
    report(1, "dpo identity", &mut dpo_identity);
    report(2, "gradient oracle", &mut gradient_oracles);
    report(3, "pair-builder truth table", &mut truth_table);
    report(4, "split fidelity", &mut split_fidelity);
    report(7, "evaluator fixtures", &mut evaluator_fixtures);
    report(8, "schedule exactness", &mut schedule_exactness);

    if std::env::var_os("ACCEPTANCE_SKIP_EXPERIMENT").is_some() {
        println!("SKIP 5 end-to-end ordering: ACCEPTANCE_SKIP_EXPERIMENT is set");
        println!("SKIP 6 low-resource ordering: ACCEPTANCE_SKIP_EXPERIMENT is set");
        std::process::exit(if failed == 0 { 0 } else { 1 });
    }
    println!("running the toy experiment over seeds {SEEDS:?} and all fractions");
    let start = Instant::now();
    let results = run_experiment();
    let total = start.elapsed().as_secs_f64();
    match results {
        Ok(results) => {
            report(5, "end-to-end ordering", &mut || end_to_end_ordering(&results));
            report(6, "low-resource ordering", &mut || low_resource(&results, total));
        }
        Err(e) => {
            report(5, "end-to-end ordering", &mut || Err(e.clone()));
            report(6, "low-resource ordering", &mut || Err(e.clone()));
        }
    }
    if failed > 0 {
        println!("{failed} criterion/criteria failed");
        std::process::exit(1);
    }
}
