use clap::Parser;

fn main() {
    let cli = handoff::cli::Cli::parse();
    if let Err(e) = handoff::cli::run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
