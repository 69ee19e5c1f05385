fn main() {
    std::process::exit(switchgen::cli::main_with_args(std::env::args_os()));
}
