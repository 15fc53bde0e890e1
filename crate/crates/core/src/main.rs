fn main() {
    std::process::exit(squeezetime::cli::run(std::env::args_os()));
}
