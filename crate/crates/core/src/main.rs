fn main() {
    std::process::exit(fedepa::cli::main());
}
