fn main() {
    std::process::exit(mpt_core::workbench::cli::run(std::env::args().collect()));
}
