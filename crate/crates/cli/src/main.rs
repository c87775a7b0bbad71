fn main() {
    std::process::exit(lexki_cli::run(std::env::args()));
}
