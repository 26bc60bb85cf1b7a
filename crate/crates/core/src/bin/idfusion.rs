fn main() {
    std::process::exit(idfusion::cli::main_with_args(std::env::args_os()));
}
