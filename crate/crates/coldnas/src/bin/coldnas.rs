fn main() {
    std::process::exit(coldnas::cli::run());
}
