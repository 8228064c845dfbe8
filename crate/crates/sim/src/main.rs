fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("BWBROKER_LOG", "warn")).init();
    std::process::exit(bwbroker_sim::cli::main_with(std::env::args_os()));
}
