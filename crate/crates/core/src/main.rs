fn main() {
    std::process::exit(fusionbench::cli::run(std::env::args().collect()));
}
