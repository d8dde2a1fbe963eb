use std::process::ExitCode;

fn main() -> ExitCode {
    match glintfield::cli::main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
