mod args;
mod commands;
mod config;
mod error;
mod manifest;

use std::process::ExitCode;

use clap::Parser;

use args::{BenchCommand, Cli, Command, SweepCommand};
use error::{CliResult, EXIT_OK, EXIT_USAGE};

fn workers(command: &Command) -> usize {
    let common = match command {
        Command::TeacherSynth(a) => &a.common,
        Command::TeacherRange(_) => return 1,
        Command::Distill(a) => &a.common,
        Command::Finetune(a) => &a.common,
        Command::Eval(a) => &a.common,
        Command::Similarity(a) => &a.common,
        Command::Augment(a) => &a.common,
        Command::Bench(BenchCommand::Params(a)) => &a.common,
        Command::Bench(BenchCommand::Speed(a)) => &a.common,
        Command::Sweep(SweepCommand::DataFraction(a)) => &a.common,
        Command::Sweep(SweepCommand::DistillSize(a)) => &a.common,
        Command::Gradcheck(a) => &a.common,
    };
    common.workers.unwrap_or(1).max(1)
}

fn run(command: &Command) -> CliResult<()> {
    match command {
        Command::TeacherSynth(a) => commands::teacher_synth(a),
        Command::TeacherRange(a) => commands::teacher_range(a),
        Command::Distill(a) => commands::distill_cmd(a),
        Command::Finetune(a) => commands::finetune_cmd(a),
        Command::Eval(a) => commands::eval_cmd(a),
        Command::Similarity(a) => commands::similarity_cmd(a),
        Command::Augment(a) => commands::augment_cmd(a),
        Command::Bench(BenchCommand::Params(a)) => commands::bench_params(a),
        Command::Bench(BenchCommand::Speed(a)) => commands::bench_speed(a),
        Command::Sweep(SweepCommand::DataFraction(a)) => commands::sweep_fraction(a),
        Command::Sweep(SweepCommand::DistillSize(a)) => commands::sweep_size(a),
        Command::Gradcheck(a) => commands::gradcheck_cmd(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(workers(&cli.command)).build() {
        Ok(pool) => pool,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return ExitCode::from(EXIT_USAGE as u8);
        }
    };
    match pool.install(|| run(&cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
