use clap::Parser;

#[derive(Parser)]
#[command(name = "accel-service", version, about = "Serve a trained model bundle over HTTP")]
struct Cli {
    #[command(flatten)]
    serve: accel_service::ServeArgs,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = accel_service::run(&cli.serve) {
        eprintln!("error: {e}");
        let code = match &e {
            accel_service::RunError::Setup(e) if e.is_invalid_input() || matches!(e, accel_core::Error::Config(_)) => 2,
            _ => 1,
        };
        std::process::exit(code);
    }
}
