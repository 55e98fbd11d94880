fn main() {
    std::process::exit(trml::cli::run_command(std::env::args()));
}
