fn main() {
    std::process::exit(gadet::cli::run(std::env::args_os()));
}
