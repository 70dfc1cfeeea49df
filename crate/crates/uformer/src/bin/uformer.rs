fn main() {
    std::process::exit(uformer::cli::run(std::env::args_os()));
}
