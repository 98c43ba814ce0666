fn main() {
    std::process::exit(kvtriage::cli::run(std::env::args_os()));
}
