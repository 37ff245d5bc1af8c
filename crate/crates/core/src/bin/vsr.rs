fn main() {
    std::process::exit(vsr::cli::main());
}
