use clap::Parser;

fn main() {
    let cli = hysdelay::cli::Cli::parse();
    std::process::exit(hysdelay::cli::run(cli));
}
