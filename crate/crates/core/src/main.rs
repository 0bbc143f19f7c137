fn main() {
    std::process::exit(attfc::cli::run_from_args(std::env::args_os()));
}
