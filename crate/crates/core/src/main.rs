use std::process::ExitCode;

fn main() -> ExitCode {
    prefopt::cli::main_with_args(std::env::args_os())
}
