fn main() {
    std::process::exit(maxentmil_cli::main_with_args(std::env::args_os()));
}
