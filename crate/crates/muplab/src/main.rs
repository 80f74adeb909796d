use clap::Parser;

fn main() {
    let cli = muplab::cli::Cli::parse();
    std::process::exit(muplab::cli::run(cli));
}
