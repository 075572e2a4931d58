fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    kdm::cli::configure_threads();
    std::process::exit(kdm::cli::run(std::env::args_os()));
}
