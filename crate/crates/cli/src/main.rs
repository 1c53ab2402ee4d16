fn main() {
    std::process::exit(fedkit_cli::run(std::env::args_os()));
}
