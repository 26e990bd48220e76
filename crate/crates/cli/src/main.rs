use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(nabla_cli::run(std::env::args_os()))
}
