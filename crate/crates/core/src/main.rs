fn main() {
    std::process::exit(disagree_kit::cli::main());
}
