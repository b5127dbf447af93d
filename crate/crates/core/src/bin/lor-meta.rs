fn main() {
    std::process::exit(lor_meta::cli::run(std::env::args_os()));
}
