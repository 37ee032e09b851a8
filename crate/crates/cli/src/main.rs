fn main() {
    std::process::exit(ldam_cli::main_with_args(std::env::args_os()));
}
