fn main() {
    std::process::exit(lgd_core::cli::run(std::env::args_os()));
}
