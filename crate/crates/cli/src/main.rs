use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = dcdg_cli::Cli::parse();
    if let Err(e) = dcdg_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.code as i32);
    }
}
