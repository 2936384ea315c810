fn main() {
    std::process::exit(connex_cli::run(std::env::args().collect()));
}
