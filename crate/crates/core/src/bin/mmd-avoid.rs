use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(mmd_avoid::cli::main_with_args(std::env::args_os(), &mut std::io::stderr()))
}
