fn main() {
    std::process::exit(depthfusion::cli::main_entry());
}
