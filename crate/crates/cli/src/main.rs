use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = accel_cli::Cli::parse();
    let mut out = std::io::stdout().lock();
    let mut err = std::io::stderr();
    if let Err(e) = accel_cli::run(cli, &mut out, &mut err) {
        eprintln!("error: {e}");
        std::process::exit(e.code);
    }
}
