fn main() {
    let code = fvtest::cli::run(std::env::args());
    std::process::exit(code);
}
