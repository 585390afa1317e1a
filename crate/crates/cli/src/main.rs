fn main() {
    std::process::exit(camib_cli::run(std::env::args_os()));
}
