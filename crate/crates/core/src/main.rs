use std::process::ExitCode;

fn main() -> ExitCode {
    sohwm::cli::main_with_args(std::env::args_os())
}
