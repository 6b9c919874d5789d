fn main() {
    std::process::exit(adverx::cli::run(std::env::args_os()));
}
