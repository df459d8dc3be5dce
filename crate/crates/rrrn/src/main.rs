fn main() {
    std::process::exit(rrrn::cli::main_with_args(std::env::args_os()));
}
