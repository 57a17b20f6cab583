fn main() {
    std::process::exit(kwsnas::cli::main_with_args(std::env::args_os()));
}
