fn main() {
    std::process::exit(retina_dx::cli::run());
}
