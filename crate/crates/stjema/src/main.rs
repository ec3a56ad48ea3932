fn main() {
    std::process::exit(stjema::cli::run(std::env::args().collect()));
}
