fn main() {
    std::process::exit(cropcast::cli::run());
}
