fn main() {
    std::process::exit(advice_efficient::cli::main_with_args(std::env::args_os()));
}
