fn main() {
    regimeclust_cli::init_logging();
    std::process::exit(regimeclust_cli::run(std::env::args_os()));
}
