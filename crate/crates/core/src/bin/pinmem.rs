use clap::Parser;

fn main() {
    std::process::exit(pinmem::cli::run(pinmem::cli::Cli::parse()));
}
