use clap::Parser;
use maskedkd_cli::{run, Cli};

fn main() {
    // clap exits with 2 on usage errors and 0 for --help
    let cli = Cli::parse();
    let stdout = std::io::stdout();
    if let Err(e) = run(&cli, &mut stdout.lock()) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
