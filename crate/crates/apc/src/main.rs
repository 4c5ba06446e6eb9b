fn main() {
    std::process::exit(apc::cli::run(std::env::args_os()));
}
