use env_logger::Env;

fn main() {
    env_logger::Builder::from_env(Env::new().filter_or("ARBO_LOG", "info"))
        .format_timestamp(None)
        .init();
    std::process::exit(arbo::cli::run(std::env::args_os()));
}
