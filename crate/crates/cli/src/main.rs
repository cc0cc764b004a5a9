use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    // usage errors exit with status 2 via clap
    let cli = ddm_cli::Cli::parse();
    if let Err(e) = ddm_cli::run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
