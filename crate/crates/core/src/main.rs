fn main() {
    std::process::exit(stochdiss::cli::run(std::env::args_os()));
}
