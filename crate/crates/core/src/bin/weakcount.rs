use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use weakcount::autodiff::Tensor;
use weakcount::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use weakcount::config::{parse_config, RunConfig};
use weakcount::datagen::{generate_dataset, load_dataset, save_dataset};
use weakcount::eval::{ablation_suite, consistency_gap, mae_mse, robustness_sweep, run_arm, split_scenes, write_records, ExperimentRecord, SuiteReport};
use weakcount::glc::{History, PartitionGrid};
use weakcount::verify::{gradcheck_suite, GRADCHECK_TOLERANCE};
use weakcount::{Error, Result};

#[derive(Parser)]
#[command(name = "weakcount", version, about = "Weakly-supervised counting on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file from the dataset keys of a config.
    Datagen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model on the training split and save a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch losses as CSV.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Score a checkpoint on every scene of a dataset file.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the head/loss ablation over the configured seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train under label deviation for each sigma.
    Robustness {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated; defaults to the config's `sigmas`.
        #[arg(long, value_delimiter = ',')]
        sigmas: Option<Vec<f64>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check every backward rule against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

const SEED: &str = "meta.seed";
const FINAL_LOSSES: &str = "meta.final_losses";
const GAP_GRID: &str = "meta.gap_grid";

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_history(path: &Path, history: &History) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(create(path)?);
    w.write_record(["epoch", "l_r", "l_c", "l_gt", "alpha", "total"])?;
    let f = |v: f64| format!("{v:.16e}");
    for e in &history.epochs {
        let l = &e.losses;
        w.write_record([
            e.epoch.to_string(),
            f(l.l_r),
            f(l.l_c),
            l.l_gt.map(f).unwrap_or_default(),
            f(l.alpha),
            f(l.total),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_report(path: &Path, report: &SuiteReport) -> Result<()> {
    for (arm, seed, err) in &report.failures {
        eprintln!("{arm} seed {seed} aborted: {err}");
    }
    let mut out = create(path)?;
    write_records(&mut out, &report.records)?;
    out.flush()?;
    match report.failures.first() {
        Some((arm, seed, err)) if err.is_numerical() => Err(Error::NonFinite {
            context: format!("{} aborted runs, first {arm} seed {seed}", report.failures.len()),
        }),
        Some((_, _, err)) => Err(Error::InvalidConfig {
            field: "run".into(),
            reason: err.to_string(),
        }),
        None => Ok(()),
    }
}

fn train(config: &Path, data: &Path, out: &Path, history: Option<&Path>) -> Result<()> {
    let config = parse_config(config)?;
    let scenes = load_dataset(data)?;
    let (tr, te) = split_scenes(&config, &scenes)?;
    let result = run_arm("train", &config, tr, te, config.seed)?;
    let last = result.outcome.history.last().expect("at least one epoch");
    println!("epochs {}  final L_r {:.4}  L_c {:.4}", result.outcome.history.len(), last.losses.l_r, last.losses.l_c);
    println!("test MAE {:.4}  MSE {:.4}", result.record.mae, result.record.mse);
    if let Some(path) = history {
        write_history(path, &result.outcome.history)?;
    }
    let mut ckpt = Checkpoint::from_model(&result.outcome.model, &config.digest(), Some(&result.outcome.optimizer))?;
    ckpt.tensors.insert(SEED.into(), Tensor::scalar(config.seed as f64));
    ckpt.tensors.insert(FINAL_LOSSES.into(), Tensor::vector(vec![last.losses.l_r, last.losses.l_c]));
    ckpt.tensors.insert(GAP_GRID.into(), Tensor::vector(vec![config.grid.rows as f64, config.grid.cols as f64]));
    save_checkpoint(out, &ckpt)
}

fn eval(ckpt: &Path, data: &Path, out: &Path) -> Result<()> {
    let ckpt = load_checkpoint(ckpt)?;
    let model = ckpt.model()?;
    let scenes = load_dataset(data)?;
    let preds = scenes.iter().map(|s| model.predict(&s.image)).collect::<Result<Vec<_>>>()?;
    let counts: Vec<f64> = scenes.iter().map(|s| s.count as f64).collect();
    let (mae, mse) = mae_mse(&preds, &counts)?;
    let meta = |name: &str| ckpt.tensors.get(name).map(|t| t.data().to_vec()).unwrap_or_default();
    let grid = match meta(GAP_GRID)[..] {
        [r, c] => PartitionGrid::new(r as usize, c as usize)?,
        _ => PartitionGrid::square(2),
    };
    let images: Vec<Tensor> = scenes.iter().map(|s| s.image.clone()).collect();
    let losses = meta(FINAL_LOSSES);
    let record = ExperimentRecord {
        arm: "eval".into(),
        config_digest: ckpt.config_digest.clone(),
        seed: meta(SEED).first().map_or(0, |&s| s as u64),
        mae,
        mse,
        final_lr: losses.first().copied().unwrap_or(f64::NAN),
        final_lc: losses.get(1).copied().unwrap_or(f64::NAN),
        consistency_gap: consistency_gap(&model, &images, grid)?,
        seconds: 0.0,
    };
    println!("{} scenes  MAE {mae:.4}  MSE {mse:.4}", scenes.len());
    let mut w = create(out)?;
    write_records(&mut w, &[record])?;
    w.flush()?;
    Ok(())
}

fn gradcheck(seed: u64) -> Result<()> {
    let outcome = gradcheck_suite(seed)?;
    for c in outcome.failures() {
        eprintln!("FAIL {} seed {} error {:.3e}", c.name, c.seed, c.max_error);
    }
    println!(
        "{} cases, max error {:.3e} (tolerance {GRADCHECK_TOLERANCE:e}); injected fault error {:.3e}",
        outcome.cases.len(),
        outcome.max_error(),
        outcome.control_error
    );
    if outcome.passed() {
        Ok(())
    } else if !outcome.control_detected() {
        Err(Error::GradCheck("injected adjoint fault went unnoticed".into()))
    } else {
        Err(Error::GradCheck(format!("{} cases over tolerance", outcome.failures().count())))
    }
}

fn load(config: &Path, data: &Path) -> Result<(RunConfig, Vec<weakcount::datagen::SyntheticScene>)> {
    Ok((parse_config(config)?, load_dataset(data)?))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Datagen { spec, out } => {
            let config = parse_config(spec)?;
            let scenes = generate_dataset(&config.dataset)?;
            save_dataset(&out, &scenes)?;
            println!("wrote {} scenes to {}", scenes.len(), out.display());
            Ok(())
        }
        Command::Train { config, data, out, history } => train(&config, &data, &out, history.as_deref()),
        Command::Eval { ckpt, data, out } => eval(&ckpt, &data, &out),
        Command::Ablate { config, data, out } => {
            let (config, scenes) = load(&config, &data)?;
            write_report(&out, &ablation_suite(&config, &scenes)?)
        }
        Command::Robustness { config, data, sigmas, out } => {
            let (config, scenes) = load(&config, &data)?;
            let sigmas = sigmas.unwrap_or_else(|| config.sigmas.clone());
            write_report(&out, &robustness_sweep(&config, &scenes, &sigmas)?)
        }
        Command::Gradcheck { seed } => gradcheck(seed),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
