fn main() {
    std::process::exit(updraft::cli::run(std::env::args_os()));
}
