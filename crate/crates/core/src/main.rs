use clap::Parser;

use skymec::cli::{run, Cli};

fn main() {
    let raw: Vec<String> = std::env::args().collect();
    let cli = Cli::parse();
    if let Err(e) = run(cli, &raw) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
