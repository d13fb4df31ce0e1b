fn main() {
    std::process::exit(fracmle::cli::main());
}
