mod error;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use selfrefine::corpus::Fraction;
use selfrefine::eval::{emit_report, AccuracyCell, CurvePoint, Report};
use selfrefine::pipeline::RunConfig;
use selfrefine::refine::Variant;
use selfrefine::teacher::TeacherKind;

use error::{code, CliResult, EXIT_CODES_HELP};
use run::{write_snapshot, PolicyRef, Run, RunLock};

/// Teacher-annotated instruction-tuning followed by preference-based
/// self-refinement of a small policy.
#[derive(Parser)]
#[command(name = "selfrefine", version, after_help = EXIT_CODES_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic task items.
    GenData(Opts),
    /// Annotate items with the teacher and draw the low-resource splits.
    Annotate(Opts),
    /// Build the base policy and instruction-tune it on each task.
    Tune(Opts),
    /// Self-refine each instruction-tuned policy on its own task.
    Refine(Opts),
    /// Evaluate the base, instructed and refined policies on the test split.
    Eval(Opts),
    /// Train-on × evaluate-on accuracy matrix over the configured seeds.
    Matrix(Opts),
    /// Accuracy against training-data fraction over the configured seeds.
    Curve(Opts),
    /// Write CSV tables and charts from the evaluations.
    Report(Opts),
    /// gen-data, annotate, tune, refine, eval and report in order.
    Pipeline(Opts),
}

#[derive(Args, Clone)]
#[command(after_help = EXIT_CODES_HELP)]
struct Opts {
    /// Run configuration (TOML); the bundled toy configuration when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Preference-pair construction.
    #[arg(long, value_parser = ["cot", "answer"])]
    variant: Option<String>,
    /// Share of the training corpus: 1.0, .75, .5 or .25.
    #[arg(long, default_value = "1.0")]
    fraction: String,
    /// Annotation teacher.
    #[arg(long, value_parser = ["oracle", "external"])]
    teacher: Option<String>,
}

pub const TOY_CONFIG: &str = include_str!("../../../configs/toy.toml");

impl Opts {
    fn resolve(&self) -> CliResult<(RunConfig, Fraction)> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::from_toml(TOY_CONFIG)?,
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(v) = &self.variant {
            cfg.refine.variant = v.parse::<Variant>()?;
        }
        if let Some(t) = &self.teacher {
            cfg.teacher.kind = t.parse::<TeacherKind>()?;
        }
        cfg.validate()?;
        Ok((cfg, self.fraction.parse()?))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { code::USAGE } else { code::OK });
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::from(code::OK),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn execute(command: Command) -> CliResult<()> {
    let opts = match &command {
        Command::GenData(o)
        | Command::Annotate(o)
        | Command::Tune(o)
        | Command::Refine(o)
        | Command::Eval(o)
        | Command::Matrix(o)
        | Command::Curve(o)
        | Command::Report(o)
        | Command::Pipeline(o) => o.clone(),
    };
    let (cfg, fraction) = opts.resolve()?;
    let _lock = RunLock::acquire(&cfg)?;
    let snapshot = write_snapshot(&cfg)?;
    log::info!("resolved configuration written to {}", snapshot.display());
    let mut run = Run::new(cfg);
    match command {
        Command::GenData(_) => gen_data(&run),
        Command::Annotate(_) => annotate(&run),
        Command::Tune(_) => tune(&run, fraction),
        Command::Refine(_) => refine(&run, fraction),
        Command::Eval(_) => eval(&run, fraction),
        Command::Matrix(_) => {
            run.build_upstream = true;
            let cells = run.full_matrix(fraction)?;
            run.save_table("matrix", fraction, &cells)?;
            log::info!("matrix: {} cells", cells.len());
            Ok(())
        }
        Command::Curve(_) => {
            run.build_upstream = true;
            let points = run.curve()?;
            run.save_table("curve", fraction, &points)?;
            log::info!("curve: {} points", points.len());
            Ok(())
        }
        Command::Report(_) => report(&run, fraction),
        Command::Pipeline(_) => {
            gen_data(&run)?;
            annotate(&run)?;
            tune(&run, fraction)?;
            refine(&run, fraction)?;
            eval(&run, fraction)?;
            report(&run, fraction)
        }
    }
}

fn gen_data(run: &Run) -> CliResult<()> {
    for spec in &run.cfg.corpus.tasks {
        let items = run.items(run.cfg.seed, spec, true)?;
        log::info!("{}: {} items", spec.task_id, items.len());
    }
    Ok(())
}

fn annotate(run: &Run) -> CliResult<()> {
    for spec in &run.cfg.corpus.tasks {
        let data = run.data(run.cfg.seed, spec, true)?;
        log::info!("{}: {:?}", spec.task_id, run::describe(&data));
    }
    Ok(())
}

fn tune(run: &Run, fraction: Fraction) -> CliResult<()> {
    let seed = run.cfg.seed;
    run.policy(seed, &PolicyRef::Base, true)?;
    for spec in &run.cfg.corpus.tasks {
        let p = PolicyRef::Instructed {
            task: spec.task_id.clone(),
            fraction,
        };
        run.policy(seed, &p, true)?;
    }
    Ok(())
}

fn refine(run: &Run, fraction: Fraction) -> CliResult<()> {
    for spec in &run.cfg.corpus.tasks {
        let p = PolicyRef::Refined {
            source: Some(spec.task_id.clone()),
            task: spec.task_id.clone(),
            fraction,
        };
        run.policy(run.cfg.seed, &p, true)?;
    }
    Ok(())
}

fn eval(run: &Run, fraction: Fraction) -> CliResult<()> {
    for (p, task, kind) in run.standard_evals(fraction) {
        // the policy must exist before its evaluation is built
        run.policy(run.cfg.seed, &p, false)?;
        run.evaluation(run.cfg.seed, &p, &task, kind, true)?;
    }
    Ok(())
}

fn report(run: &Run, fraction: Fraction) -> CliResult<()> {
    let matrix: Vec<AccuracyCell> = match run.load_table("matrix", fraction)? {
        Some(cells) => cells,
        None => run.eval_matrix(fraction)?,
    };
    let curve: Vec<CurvePoint> = run.load_table("curve", fraction)?.unwrap_or_default();
    let mut records = Vec::new();
    for (p, task, kind) in run.standard_evals(fraction) {
        run.evaluation(run.cfg.seed, &p, &task, kind, false)?;
        if !matches!(p, PolicyRef::Refined { .. }) {
            continue;
        }
        records.extend(run.eval_records(run.cfg.seed, &p, &task, kind)?);
    }
    let dir = run::run_dir(&run.cfg, "reports");
    let files = emit_report(
        &Report {
            matrix: &matrix,
            curve: &curve,
            records: &records,
        },
        &dir,
    )?;
    for cell in &matrix {
        if let Some(s) = cell.stats {
            println!(
                "{:<10} {:<10} {:<18} {:6.2}",
                cell.trained_on.as_deref().unwrap_or("-"),
                cell.evaluated_on,
                cell.regime.name(),
                s.accuracy
            );
        }
    }
    log::info!("wrote {} report files to {}", files.len(), dir.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_config_is_the_library_default() {
        assert_eq!(RunConfig::from_toml(TOY_CONFIG).unwrap(), RunConfig::default());
    }

    #[test]
    fn overrides_apply_before_validation() {
        let opts = Opts {
            config: None,
            seed: Some(7),
            out: Some("elsewhere".into()),
            variant: Some("answer".into()),
            fraction: ".25".into(),
            teacher: Some("external".into()),
        };
        let (cfg, fraction) = opts.resolve().unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.out_dir, PathBuf::from("elsewhere"));
        assert_eq!(cfg.refine.variant, Variant::Answer);
        assert_eq!(cfg.teacher.kind, TeacherKind::External);
        assert_eq!(fraction, Fraction::Quarter);
    }
}
