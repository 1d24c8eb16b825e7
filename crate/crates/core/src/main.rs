fn main() {
    std::process::exit(nmgrad::cli::run(std::env::args_os().collect()));
}
