fn main() {
    std::process::exit(lls_core::cli::main());
}
