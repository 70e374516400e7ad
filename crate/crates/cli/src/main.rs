use clap::Parser;
use gmmflow_cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(text) => {
            if !text.is_empty() {
                println!("{text}");
            }
        }
        Err(e) => {
            eprintln!("gmmflow: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
