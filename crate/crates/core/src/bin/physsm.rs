fn main() {
    std::process::exit(physsm::cli::run(std::env::args_os()));
}
