fn main() {
    std::process::exit(cudkit::cli::main_with_args(std::env::args_os()));
}
