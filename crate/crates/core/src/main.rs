fn main() {
    std::process::exit(abnet::cli::run_cli(std::env::args()));
}
