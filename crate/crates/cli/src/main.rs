use std::process::ExitCode;

fn main() -> ExitCode {
    match diffreg_cli::execute(std::env::args_os()) {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, line)) => {
            eprintln!("{line}");
            ExitCode::from(code)
        }
    }
}
