use clap::Parser;
use retreg::cli::{exit_code_for, run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(&cli) {
        eprintln!("error: {err}");
        std::process::exit(exit_code_for(&err));
    }
}
