use clap::Parser;

fn main() {
    let cli = uvl_cli::Cli::parse();
    if let Err(err) = uvl_cli::run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(uvl_cli::exit_code(&err));
    }
}
