use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tiny_sepformer::checkpoint::{stored_width, Checkpoint};
use tiny_sepformer::harness::attention::{attention_maps, write_maps, Selector};
use tiny_sepformer::harness::eval::evaluate;
use tiny_sepformer::harness::gradcheck::grad_check_model;
use tiny_sepformer::harness::report::write_report;
use tiny_sepformer::harness::run::{Precision, RunConfig};
use tiny_sepformer::harness::train::train;
use tiny_sepformer::harness::wav::{read_wav, write_wav};
use tiny_sepformer::params_count::count_model;
use tiny_sepformer::{Error, Model32, Model64, Result, Scalar, TinySepformer};

#[derive(Parser)]
#[command(name = "tinysep", version, about = "Tiny-Sepformer speech separation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on synthetic mixtures; writes a checkpoint and report to output.dir
    Train { config: PathBuf },
    /// Separate a mono 16-bit WAV into one file per source
    Separate {
        checkpoint: PathBuf,
        input: PathBuf,
        outdir: PathBuf,
    },
    /// SI-SNRi / SDRi on held-out synthetic mixtures
    Eval { checkpoint: PathBuf, config: PathBuf },
    /// Compare tape gradients with finite differences in double precision
    GradCheck { config: PathBuf },
    /// Analytic and instantiated parameter counts
    CountParams { config: PathBuf },
    /// Write attention maps of one layer as CSV grids
    DumpAttention {
        checkpoint: PathBuf,
        input: PathBuf,
        /// block:intra|inter:iteration:head, zero-based
        selector: String,
        outdir: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { config } => {
            let run = RunConfig::load(&config)?;
            match run.train.precision {
                Precision::F32 => train_cmd::<f32>(&run),
                Precision::F64 => train_cmd::<f64>(&run),
            }
        }
        Command::Separate {
            checkpoint,
            input,
            outdir,
        } => match stored_width(&checkpoint)? {
            8 => separate_cmd::<f64>(&checkpoint, &input, &outdir),
            _ => separate_cmd::<f32>(&checkpoint, &input, &outdir),
        },
        Command::Eval { checkpoint, config } => {
            let run = RunConfig::load(&config)?;
            match stored_width(&checkpoint)? {
                8 => eval_cmd::<f64>(&checkpoint, &run),
                _ => eval_cmd::<f32>(&checkpoint, &run),
            }
        }
        Command::GradCheck { config } => {
            let run = RunConfig::load(&config)?;
            let mut model = Model64::new(run.model.clone())?;
            let report = grad_check_model(&mut model, &run.data, &run.grad_check)?;
            let text = report.render_text();
            print!("{text}");
            write_report(&run.output_dir, "gradcheck_report", &text, &report.to_kv())?;
            report.check()
        }
        Command::CountParams { config } => {
            let run = RunConfig::load(&config)?;
            let model = Model32::new(run.model.clone())?;
            let report = count_model(&run.model).with_empirical(&model);
            let text = report.render_text();
            print!("{text}");
            write_report(&run.output_dir, "params_report", &text, &report.to_kv())?;
            if report.total_empirical != Some(report.total_analytic) {
                return Err(Error::Contract("analytic and instantiated counts differ".into()));
            }
            Ok(())
        }
        Command::DumpAttention {
            checkpoint,
            input,
            selector,
            outdir,
        } => {
            let sel: Selector = selector.parse()?;
            match stored_width(&checkpoint)? {
                8 => dump_cmd::<f64>(&checkpoint, &input, sel, &outdir),
                _ => dump_cmd::<f32>(&checkpoint, &input, sel, &outdir),
            }
        }
    }
}

fn load_model<T: Scalar>(path: &Path) -> Result<TinySepformer<T>> {
    Checkpoint::<T>::load(path)?.build_model()
}

fn train_cmd<T: Scalar>(run: &RunConfig) -> Result<()> {
    let trained = train::<T>(run)?;
    let path = trained.save(run)?;
    print!("{}", trained.report.render_text(run.train.log_every));
    println!("checkpoint      {}", path.display());
    Ok(())
}

fn separate_cmd<T: Scalar>(checkpoint: &Path, input: &Path, outdir: &Path) -> Result<()> {
    let model = load_model::<T>(checkpoint)?;
    let wave = read_wav(input, Some(model.config.sample_rate))?;
    let (est, _) = model.separate(&wave.cast::<T>())?;
    std::fs::create_dir_all(outdir)?;
    for (k, s) in est.sources.iter().enumerate() {
        let path = outdir.join(format!("source{}.wav", k + 1));
        write_wav(&path, s)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn eval_cmd<T: Scalar>(checkpoint: &Path, run: &RunConfig) -> Result<()> {
    let model = load_model::<T>(checkpoint)?;
    if model.config.speakers != run.data.speakers || model.config.sample_rate != run.data.sample_rate {
        return Err(Error::Config(
            "checkpoint speakers or sample rate differ from the evaluation data".into(),
        ));
    }
    let report = evaluate(&model, &run.eval_data()?, run.eval.mixtures)?;
    let text = report.render_text();
    print!("{text}");
    write_report(&run.output_dir, "eval_report", &text, &report.to_kv())?;
    Ok(())
}

fn dump_cmd<T: Scalar>(checkpoint: &Path, input: &Path, sel: Selector, outdir: &Path) -> Result<()> {
    let model = load_model::<T>(checkpoint)?;
    let wave = read_wav(input, Some(model.config.sample_rate))?.cast::<T>();
    let maps = attention_maps(&model, &wave.samples, sel)?;
    let paths = write_maps(outdir, sel, &maps)?;
    let n = maps.first().map_or(0, |m| m.last_dim());
    println!("wrote {} maps of {n}x{n} to {}", paths.len(), outdir.display());
    Ok(())
}
