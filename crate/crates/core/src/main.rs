fn main() {
    std::process::exit(fmital::cli::main_with_args(std::env::args_os()));
}
