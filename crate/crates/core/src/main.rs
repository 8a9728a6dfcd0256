use std::process::ExitCode;

fn main() -> ExitCode {
    biphoton::cli::run(std::env::args_os())
}
