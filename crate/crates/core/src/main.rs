use clap::Parser;
use inattention::cli::{run, Cli};

fn main() {
    std::process::exit(run(Cli::parse()));
}
