fn main() {
    std::process::exit(simulstream::cli::run(std::env::args_os()));
}
