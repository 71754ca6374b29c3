use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use cardiseg::config::{DataSource, ExperimentConfig};
use cardiseg::data::synth::{synth_generate, Distribution, SynthSpec};
use cardiseg::data::{write_dataset, DatasetIndex, VolumeFormat};
use cardiseg::diagnostics::{network_checks, op_checks, TOLERANCE};
use cardiseg::experiments::{
    best_point, crossval_folds, evaluate_on_dataset, fold_configs, finetune_sweep, gap_report, improvement_summary, run_crossval, write_run,
    Baseline, LabelScores, RunOptions, LABELS,
};
use cardiseg::report::{self, delta_rows, fold_rows, sweep_rows, write_csv, write_gap_report, write_json};
use cardiseg::tensor::Real;
use cardiseg::train::{fit, load_checkpoint, FitOptions, Resume};
use cardiseg::unet::UNetModel;
use cardiseg::{Error, Result};

#[derive(Parser)]
#[command(name = "cardiseg", version, about = "2D U-Net cardiac MRI segmentation and generalization-gap experiments")]
struct Cli {
    /// JSON experiment configuration; every field defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the model and training seeds (and the generator seed of `synth`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Root of the results tree.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    #[arg(long, global = true, value_enum, default_value_t = Precision::F32)]
    precision: Precision,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Cohort {
    A,
    B,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Raw,
    Nifti,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom dataset into --out.
    Synth {
        #[arg(long, value_enum, default_value_t = Cohort::A)]
        distribution: Cohort,
        #[arg(long)]
        patients: Option<usize>,
        #[arg(long, value_enum, default_value_t = Format::Raw)]
        format: Format,
    },
    /// k-fold cross-validation with unseen-cohort evaluation and a gap report.
    Crossval,
    /// Train one model on the baseline fold's training split.
    Train,
    /// Evaluate a checkpoint on the training cohort or the unseen cohort.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        unseen: bool,
    },
    /// Finetuning sweep over added unseen-cohort patients.
    Finetune,
    /// Render SVG plots from a results directory (default: the experiment directory).
    Report {
        #[arg(long)]
        results: Option<PathBuf>,
    },
    /// Finite-difference gradient checks of every op and of a tiny U-Net (always f64).
    Gradcheck {
        /// Sampled coordinates per tensor in the network checks.
        #[arg(long, default_value_t = 2)]
        per_input: usize,
    },
}

struct Ctx {
    cfg: ExperimentConfig,
    /// Directory relative manifest paths resolve against.
    base: PathBuf,
    out: PathBuf,
    seed: Option<u64>,
}

impl Ctx {
    fn experiment_dir(&self) -> Result<PathBuf> {
        let dir = self.out.join(&self.cfg.experiment.name);
        std::fs::create_dir_all(&dir).map_err(|e| Error::Config(format!("cannot create {}: {e}", dir.display())))?;
        Ok(dir)
    }

    fn train_set(&self) -> Result<DatasetIndex> {
        self.cfg.dataset.train.load(&self.base)
    }

    fn unseen_set(&self) -> Result<Option<(String, DatasetIndex)>> {
        self.cfg.dataset.unseen.as_ref().map(|s| Ok((s.cohort(), s.load(&self.base)?))).transpose()
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Ok(n) = std::env::var("CARDISEG_THREADS") {
        match n.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: CARDISEG_THREADS must be a positive integer, got {n:?}");
                return ExitCode::from(2);
            }
        }
    }
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let (mut cfg, base) = match &cli.config {
        Some(path) => (
            ExperimentConfig::load(path)?,
            path.parent().map(Path::to_path_buf).unwrap_or_default(),
        ),
        None => (ExperimentConfig::default(), PathBuf::new()),
    };
    if let Some(seed) = cli.seed {
        cfg.model.seed = seed;
        cfg.train.seed = seed;
    }
    let ctx = Ctx { cfg, base, out: cli.out, seed: cli.seed };
    match cli.command {
        Command::Synth { distribution, patients, format } => synth(&ctx, distribution, patients, format),
        Command::Gradcheck { per_input } => gradcheck(&ctx, per_input, cli.precision),
        Command::Report { results } => render(&ctx, results),
        cmd => match cli.precision {
            Precision::F32 => experiment::<f32>(&ctx, cmd),
            Precision::F64 => experiment::<f64>(&ctx, cmd),
        },
    }
}

fn synth(ctx: &Ctx, distribution: Cohort, patients: Option<usize>, format: Format) -> Result<ExitCode> {
    let dist = match distribution {
        Cohort::A => Distribution::A,
        Cohort::B => Distribution::B,
    };
    let (mut spec, mut seed) = match &ctx.cfg.dataset.train {
        DataSource::Synthetic { spec, seed } => (spec.clone(), *seed),
        DataSource::Manifest { .. } => (SynthSpec::default(), 0),
    };
    spec.distribution = dist;
    if let Some(n) = patients {
        spec.n_patients = n;
    }
    if let Some(s) = ctx.seed {
        seed = s;
    }
    let index = synth_generate(&spec, seed)?;
    let format = match format {
        Format::Raw => VolumeFormat::Raw,
        Format::Nifti => VolumeFormat::Nifti,
    };
    let manifest = write_dataset(&ctx.out, &index, format)?;
    let volumes = index.volumes().count();
    println!("wrote {} patients ({volumes} volumes) to {}", index.len(), manifest.display());
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(ctx: &Ctx, per_input: usize, precision: Precision) -> Result<ExitCode> {
    if precision == Precision::F32 {
        println!("note: gradient checks always run in f64");
    }
    let seed = ctx.seed.unwrap_or(0);
    let mut all_ok = true;
    println!("{:<32} {:>14} {:>8}", "check", "max rel error", "coords");
    for r in op_checks(seed)?.into_iter().chain(network_checks(seed, per_input)?) {
        all_ok &= r.passed();
        println!(
            "{:<32} {:>14.3e} {:>8}  {}",
            r.name,
            r.report.max_relative_error,
            r.report.coordinates_checked,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    println!("{} (tolerance {TOLERANCE:e})", if all_ok { "all checks passed" } else { "some checks failed" });
    Ok(if all_ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn render(ctx: &Ctx, results: Option<PathBuf>) -> Result<ExitCode> {
    let dir = results.unwrap_or_else(|| ctx.out.join(&ctx.cfg.experiment.name));
    let summary = report::render_plots(&dir)?;
    for w in &summary.warnings {
        eprintln!("warning: {w}");
    }
    for p in &summary.written {
        println!("wrote {}", p.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn print_scores(name: &str, s: &LabelScores) {
    let v = s.values();
    println!("{name:<16} {:>8.3} {:>8.3} {:>8.3} {:>8.3}", v[0], v[1], v[2], v[3]);
}

fn print_header() {
    println!("{:<16} {:>8} {:>8} {:>8} {:>8}", "", LABELS[0], LABELS[1], LABELS[2], LABELS[3]);
}

/// Training and test splits of the baseline fold.
fn baseline_split(ctx: &Ctx, index: &DatasetIndex) -> Result<(DatasetIndex, DatasetIndex)> {
    let x = &ctx.cfg.experiment;
    let folds = crossval_folds(index, &ctx.cfg.train, x.folds, x.split)?;
    Ok((index.subset(&folds.train_ids(x.baseline_fold)), index.subset(&folds.test_ids(x.baseline_fold))))
}

fn experiment<T: Real>(ctx: &Ctx, cmd: Command) -> Result<ExitCode> {
    let cfg = &ctx.cfg;
    let dir = ctx.experiment_dir()?;
    let options = RunOptions { out_dir: Some(dir.clone()), verbose: true };
    match cmd {
        Command::Crossval => {
            let index = ctx.train_set()?;
            let unseen = ctx.unseen_set()?;
            let run = run_crossval::<T>(
                &index,
                unseen.as_ref().map(|u| &u.1),
                &cfg.model,
                &cfg.train,
                cfg.experiment.folds,
                cfg.experiment.split,
                &options,
            )?;
            let cohort = cfg.dataset.train.cohort();
            let unseen_name = unseen.as_ref().map(|u| u.0.as_str());
            let gaps = gap_report(&cohort, unseen_name, &run.folds)?;
            write_gap_report(&dir, &gaps)?;
            write_csv(&dir.join(report::FOLD_METRICS_CSV), &fold_rows(&cohort, unseen_name, &run.folds))?;
            print_header();
            for row in gaps.rows.iter().filter(|r| r.label == "Labels") {
                let scores: Vec<f64> = LABELS.iter().map(|l| gaps.row(&row.modality, l).unwrap().mean).collect();
                let s = LabelScores { labels: scores[0], rv: scores[1], lv: scores[2], myo: scores[3] };
                print_scores(&format!("{} {}", row.evaluation_dataset, row.modality), &s);
            }
            for g in gaps.gaps.iter().filter(|g| g.label == "Labels") {
                println!("gap {:<13} {:.3}", g.kind, g.value);
            }
            println!("results in {}", dir.display());
        }
        Command::Train => {
            let (train, test) = baseline_split(ctx, &ctx.train_set()?)?;
            let (mc, tc) = fold_configs(&cfg.model, &cfg.train, cfg.experiment.baseline_fold);
            let run_dir = dir.join("train");
            std::fs::create_dir_all(&run_dir).map_err(|e| Error::Config(format!("cannot create {}: {e}", run_dir.display())))?;
            let opts = FitOptions { out_dir: Some(&run_dir), verbose: true, ..Default::default() };
            let r = fit(UNetModel::<T>::build(&mc)?, &train, Some(&test), &tc, &opts)?;
            let test_eval = evaluate_on_dataset(&r.model, &test, &tc)?;
            write_run(&run_dir, &r.history, &r.model, &test_eval)?;
            print_header();
            print_scores("test", &test_eval.mean);
            println!("checkpoint {}", run_dir.join("checkpoint.bin").display());
        }
        Command::Eval { checkpoint, unseen } => {
            let model = load_checkpoint::<T>(&checkpoint)?;
            let (name, index) = if unseen {
                ctx.unseen_set()?.ok_or_else(|| Error::Config("no unseen dataset configured".into()))?
            } else {
                (cfg.dataset.train.cohort(), ctx.train_set()?)
            };
            let eval = evaluate_on_dataset(&model, &index, &cfg.train)?;
            let path = dir.join(format!("eval_{name}.json"));
            write_json(&path, &eval)?;
            print_header();
            print_scores(&format!("{name} mean"), &eval.mean);
            print_scores(&format!("{name} sd"), &eval.sd);
            println!("per-volume scores in {}", path.display());
        }
        Command::Finetune => {
            let (a_train, a_test) = baseline_split(ctx, &ctx.train_set()?)?;
            let (_, b) = ctx.unseen_set()?.ok_or_else(|| Error::Config("finetuning needs dataset.unseen".into()))?;
            let baseline = match &cfg.experiment.baseline_checkpoint {
                Some(path) => Baseline { model: load_checkpoint::<T>(&ctx.base.join(path))?, resume: None },
                None => {
                    let (mc, tc) = fold_configs(&cfg.model, &cfg.train, cfg.experiment.baseline_fold);
                    let opts = FitOptions { verbose: true, ..Default::default() };
                    let r = fit(UNetModel::<T>::build(&mc)?, &a_train, Some(&a_test), &tc, &opts)?;
                    let resume = Resume { lr: r.state.current_lr, adam: r.adam };
                    Baseline { model: r.model, resume: Some(resume) }
                }
            };
            let spec = &cfg.experiment.finetune;
            let sweep = finetune_sweep(spec, &a_train, &a_test, &b, &baseline, &cfg.train, &options)?;
            write_csv(&dir.join(report::SWEEP_CURVES_CSV), &sweep_rows(&sweep.points))?;
            let mut deltas = vec![];
            print_header();
            print_scores("baseline B", &sweep.baseline.b_unseen);
            for &m in &spec.methods {
                if let Some(best) = best_point(&sweep.points, m) {
                    print_scores(&format!("method {} n={}", m as u8, best.n), &best.scores.b_unseen);
                    deltas.extend(delta_rows(m as u8, &improvement_summary(&sweep.baseline, &best.scores)));
                }
            }
            write_csv(&dir.join(report::IMPROVEMENT_CSV), &deltas)?;
            write_json(&dir.join("finetune.json"), &sweep.points)?;
            println!("results in {}", dir.display());
        }
        Command::Synth { .. } | Command::Report { .. } | Command::Gradcheck { .. } => unreachable!(),
    }
    Ok(ExitCode::SUCCESS)
}
