fn main() {
    std::process::exit(gtn::cli::run(std::env::args_os()));
}
