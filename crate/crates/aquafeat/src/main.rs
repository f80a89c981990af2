fn main() {
    std::process::exit(aquafeat::cli::run(std::env::args_os()));
}
