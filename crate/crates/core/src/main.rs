use std::process::ExitCode;

use clap::Parser;
use gads::cli::{cmd_eval, cmd_infer, cmd_synth, cmd_train, Cli, Command, RunConfig};

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(args) => {
            for s in cmd_train(&RunConfig::from(&args))? {
                let r = &s.report;
                let last = |v: &[f64]| v.last().copied().unwrap_or(f64::NAN);
                println!(
                    "seed {}: loss {:.6} -> {:.6} (dasl {:.6}, oasl {:.6}) -> {}",
                    s.seed,
                    r.initial_loss,
                    r.final_loss,
                    last(&r.epoch_losses),
                    last(&r.oasl_epoch_losses),
                    s.ckpt.display()
                );
            }
        }
        Command::Infer(args) => {
            for s in cmd_infer(&RunConfig::from(&args))? {
                println!("seed {}: {} records -> {}", s.seed, s.records, s.dir.display());
            }
        }
        Command::Eval(args) => {
            print!("{}", cmd_eval(&RunConfig::from(&args))?.table);
        }
        Command::Synth(args) => {
            let p = cmd_synth(&args.config(), &args.out)?;
            for path in [&p.train, &p.test, &p.prompts, &p.protos] {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
