fn main() {
    std::process::exit(spadun::cli::run());
}
