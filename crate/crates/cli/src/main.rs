use clap::Parser;
use compresskit_cli::{exit, run, Cli};

fn main() {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => std::process::exit(exit::OK),
        Err(e) => {
            eprintln!("compresskit: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
