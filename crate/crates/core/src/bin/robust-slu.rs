fn main() {
    std::process::exit(robust_slu::cli::main_with_args(std::env::args_os()));
}
