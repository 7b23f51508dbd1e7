fn main() {
    std::process::exit(nvcce::cli::main_with_args(std::env::args_os()));
}
