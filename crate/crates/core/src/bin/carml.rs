fn main() {
    std::process::exit(carml_core::cli::run());
}
