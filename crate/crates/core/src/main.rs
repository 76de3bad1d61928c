fn main() {
    std::process::exit(ossgan::cli::run(std::env::args_os()));
}
