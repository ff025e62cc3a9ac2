fn main() {
    std::process::exit(calm::cli::main_with_args(std::env::args_os()));
}
