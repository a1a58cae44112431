fn main() {
    std::process::exit(pixproto::cli::main_with_args(std::env::args_os()));
}
