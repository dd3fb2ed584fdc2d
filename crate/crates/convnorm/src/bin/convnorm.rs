use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(convnorm::cli::run(std::env::args_os()))
}
