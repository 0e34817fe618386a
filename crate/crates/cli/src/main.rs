use clap::Parser;
use microdiff_cli::{configure_workers, exit_code, run, Cli, EXIT_OK};

fn main() {
    let cli = Cli::parse();
    let result = configure_workers().and_then(|_| run(cli));
    let code = match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    };
    std::process::exit(code);
}
