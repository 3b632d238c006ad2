fn main() {
    flowsr_core::cli::init_logging();
    std::process::exit(flowsr_core::cli::run(std::env::args_os()));
}
