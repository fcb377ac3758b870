fn main() {
    std::process::exit(laxlab::cli::main_with_args(std::env::args_os()));
}
