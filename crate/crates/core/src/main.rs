use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(markov_vi::cli::main_with_args(std::env::args_os()))
}
