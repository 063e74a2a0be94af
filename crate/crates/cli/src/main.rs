use clap::Parser;
use regseg_cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Some(n) = cli.args.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot set thread count: {e}");
            std::process::exit(2);
        }
    }
    let mut stdout = std::io::stdout().lock();
    if let Err(e) = run(cli.command, &cli.args, &mut stdout) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
