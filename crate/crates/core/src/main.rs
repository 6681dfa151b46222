use inpaint_gan::cli;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = cli::init_threads() {
        eprintln!("error: {e}");
        std::process::exit(cli::EXIT_VALIDATION);
    }
    std::process::exit(cli::dispatch(std::env::args_os()));
}
