use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(smallbench_cli::run(std::env::args_os()) as u8)
}
