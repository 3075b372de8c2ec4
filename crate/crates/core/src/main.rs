use clap::Parser;

fn main() {
    let cli = refconv::cli::Cli::parse();
    if let Err(e) = refconv::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
