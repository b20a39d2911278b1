fn main() {
    std::process::exit(clustercal::cli::run());
}
