use clap::Parser;

fn main() {
    let cli = hfsynth_cli::Cli::parse();
    std::process::exit(hfsynth_cli::execute(cli));
}
