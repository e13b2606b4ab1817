fn main() {
    std::process::exit(proxyformer::cli::main());
}
