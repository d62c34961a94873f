fn main() {
    std::process::exit(otrecon::cli::main_with_args(std::env::args_os()));
}
