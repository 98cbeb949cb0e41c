use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(lcr2s_cli::app::run_cli(std::env::args_os()))
}
