fn main() {
    std::process::exit(pmol::cli::run());
}
