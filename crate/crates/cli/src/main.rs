fn main() {
    std::process::exit(spx_cli::run());
}
