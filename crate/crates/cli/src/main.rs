use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(epgt_cli::dispatch(std::env::args_os()))
}
