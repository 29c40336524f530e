fn main() {
    std::process::exit(tsb::cli::run(std::env::args()));
}
