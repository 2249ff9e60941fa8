fn main() {
    std::process::exit(mode_cli::run(std::env::args_os()));
}
