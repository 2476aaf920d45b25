use gpssm::cli::ParseError;
use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (cli, overrides) = match gpssm::cli::parse(std::env::args()) {
        Ok(p) => p,
        Err(ParseError::Args(e)) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
        Err(ParseError::Override(e)) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match gpssm::cli::run(&cli, &overrides) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
