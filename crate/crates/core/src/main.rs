use std::process::ExitCode;

fn main() -> ExitCode {
    diffcontact::cli::run()
}
