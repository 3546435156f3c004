use std::process::ExitCode;

use clap::{Parser, Subcommand};
use memts_cli::{
    cmd_bench, cmd_eval, cmd_features, cmd_finetune, cmd_gradcheck, cmd_pretrain, diagnostic, exit_code, BenchArgs, EvalArgs,
    FeaturesArgs, FinetuneArgs, GradcheckArgs, PretrainArgs, EXIT_OTHER,
};

#[derive(Parser)]
#[command(name = "memts", version, about = "Dual-memory time-series encoder: pretraining, fine-tuning and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Self-supervised pretraining on an unlabeled corpus
    Pretrain(PretrainArgs),
    /// Linear probing then full fine-tuning on a labelled split
    Finetune(FinetuneArgs),
    /// Accuracy, macro-F1 and a per-class report for a checkpoint
    Eval(EvalArgs),
    /// Statistical features of each series
    Features(FeaturesArgs),
    /// Compare analytic and finite-difference gradients layer by layer
    Gradcheck(GradcheckArgs),
    /// Forward time versus sequence length
    Bench(BenchArgs),
}

fn run(cli: Cli) -> memts::Result<bool> {
    match cli.command {
        Command::Pretrain(a) => {
            let out = cmd_pretrain(&a)?;
            if let Some(last) = out.log.rows.last() {
                println!("pretrain finished: epoch {} loss {}", last.epoch, last.loss.unwrap_or(f64::NAN));
            }
            println!("artifacts in {}", a.out.display());
        }
        Command::Finetune(a) => {
            let out = cmd_finetune(&a)?;
            if let Some(r) = &out.report {
                print!("{}", r.to_text());
            }
            println!("artifacts in {}", a.out.display());
        }
        Command::Eval(a) => print!("{}", cmd_eval(&a)?.0.to_text()),
        Command::Features(a) => {
            let (n, _) = cmd_features(&a)?;
            println!("{n} feature rows written to {}", a.out.display());
        }
        Command::Gradcheck(a) => {
            let (rep, _) = cmd_gradcheck(&a)?;
            print!("{}", rep.to_text());
            return Ok(rep.passed());
        }
        Command::Bench(a) => print!("{}", cmd_bench(&a)?.0.to_csv()),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_OTHER as u8),
        Err(e) => {
            eprintln!("{}", diagnostic(&e));
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
