fn main() {
    std::process::exit(mvci::cli::run(std::env::args().collect()));
}
