fn main() {
    std::process::exit(knowtag::cli::run(std::env::args_os()));
}
