use clap::Parser;

fn main() -> std::process::ExitCode {
    let cli = opdgeo::cli::Cli::parse();
    match opdgeo::cli::run(cli) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            std::process::ExitCode::from(e.exit_code())
        }
    }
}
