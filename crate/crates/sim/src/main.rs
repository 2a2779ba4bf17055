use std::process::ExitCode;

use clap::Parser;
use cnmpc::PreconditionerKind;
use cnmpc_sim::{emit_trace, run_comparison, run_single, tagged_path, Cli, SimError};

fn run(cli: &Cli) -> Result<(), SimError> {
    let (model, cfg) = cli.config()?;
    if cli.compare {
        let cmp = run_comparison(&model, cfg)?;
        if let Some(out) = &cli.out {
            let tag = cmp.summary.preconditioned.precond.to_string();
            emit_trace(&cmp.preconditioned, &tagged_path(out, &tag), cli.gnuplot)?;
            let none = PreconditionerKind::None.to_string();
            emit_trace(&cmp.unpreconditioned, &tagged_path(out, &none), cli.gnuplot)?;
        }
        println!("{}", cmp.summary);
    } else {
        let run = run_single(&model, cfg)?;
        if let Some(out) = &cli.out {
            emit_trace(&run.trace, out, cli.gnuplot)?;
        }
        println!("{}", run.summary);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
