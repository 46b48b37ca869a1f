fn main() {
    std::process::exit(erc::cli::run(std::env::args_os()));
}
