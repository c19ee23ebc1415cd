fn main() {
    std::process::exit(cestrade_cli::run(std::env::args_os()));
}
