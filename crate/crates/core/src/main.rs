fn main() {
    std::process::exit(segvg::cli::main());
}
