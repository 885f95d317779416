fn main() {
    std::process::exit(glim::cli::run(std::env::args_os()))
}
