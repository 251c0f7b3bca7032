fn main() {
    std::process::exit(diffcap_core::cli::run(std::env::args().skip(1)));
}
