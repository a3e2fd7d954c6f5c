use clap::Parser;

fn main() {
    let cli = match pastn::cli::Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = pastn::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
