fn main() {
    std::process::exit(fusion_index::cli::run_from(std::env::args_os()));
}
