use std::process::ExitCode;

fn main() -> ExitCode {
    foodwaste::harness::cli::run(std::env::args_os())
}
