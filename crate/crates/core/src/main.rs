fn main() {
    std::process::exit(meda::cli::run_from_args(std::env::args_os()));
}
