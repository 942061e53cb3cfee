fn main() {
    env_logger::init();
    let code = kgcm::cli::run(std::env::args_os(), &mut std::io::stdout().lock());
    std::process::exit(code);
}
