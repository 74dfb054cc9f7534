use clap::Parser;

fn main() {
    let cli = stochdet_cli::Cli::parse();
    if let Err(e) = stochdet_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(stochdet_cli::exit_code(&e));
    }
}
