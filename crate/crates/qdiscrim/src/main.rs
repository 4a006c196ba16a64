use clap::Parser;

fn main() {
    let cli = qdiscrim::cli::Cli::parse();
    std::process::exit(qdiscrim::cli::run(&cli));
}
