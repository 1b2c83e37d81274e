use clap::Parser;
use mcxtfc_cli::cli::{main_with, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = main_with(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
