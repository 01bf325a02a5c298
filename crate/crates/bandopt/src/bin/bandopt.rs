fn main() {
    std::process::exit(bandopt::cli::run(std::env::args_os()));
}
