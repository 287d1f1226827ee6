fn main() {
    std::process::exit(fmlr::cli::run(std::env::args_os()));
}
