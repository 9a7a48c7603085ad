use std::io;
use std::process::ExitCode;

fn main() -> ExitCode {
    let mut out = io::stdout().lock();
    ExitCode::from(flsim_cli::execute(std::env::args_os(), &mut out))
}
