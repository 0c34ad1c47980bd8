use std::process::ExitCode;

fn main() -> ExitCode {
    wavesf_cli::main_with(std::env::args_os())
}
