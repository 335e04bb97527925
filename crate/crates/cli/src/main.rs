fn main() {
    std::process::exit(breakiv_cli::main_with_args(std::env::args_os()));
}
