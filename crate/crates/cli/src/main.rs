use clap::Parser;
use qent_cli::{run, Cli};

fn main() {
    if let Ok(v) = std::env::var("QENT_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n >= 1 => {
                // Only fails if a pool already exists, which cannot happen here.
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global();
            }
            _ => {
                eprintln!("error: QENT_THREADS must be a positive integer, got '{v}'");
                std::process::exit(2);
            }
        }
    }
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
