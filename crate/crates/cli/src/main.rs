fn main() {
    std::process::exit(shadowstorm_cli::run_with_args(std::env::args_os()));
}
