fn main() {
    std::process::exit(ranf::cli::main_with_args(std::env::args_os()));
}
