use clap::Parser;

fn main() {
    let cli = patchnorm::cli::Cli::parse();
    std::process::exit(patchnorm::cli::run(cli));
}
