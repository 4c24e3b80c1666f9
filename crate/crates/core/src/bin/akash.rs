fn main() {
    std::process::exit(akash::cli::run(std::env::args_os()));
}
