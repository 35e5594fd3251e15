fn main() {
    std::process::exit(auroral::cli::main_with_args(std::env::args_os()));
}
