fn main() {
    std::process::exit(favor::cli::run(std::env::args_os()));
}
