fn main() {
    std::process::exit(pufwear::cli::main_with_args(std::env::args_os()));
}
