fn main() {
    std::process::exit(fedara::cli::main_with_args(std::env::args_os()));
}
