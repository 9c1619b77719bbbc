fn main() {
    std::process::exit(exfusion::cli::main());
}
