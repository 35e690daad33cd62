use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter("SERVOBOT_LOG")).init();
    let cli = servobot_cli::Cli::parse();
    std::process::exit(servobot_cli::run(cli));
}
