use clap::Parser;

fn main() {
    let cli = bctrace::cli::Cli::parse();
    std::process::exit(bctrace::cli::main_with(cli));
}
