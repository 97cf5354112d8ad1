fn main() {
    std::process::exit(nlpsens::cli::main_with_args(std::env::args_os()));
}
