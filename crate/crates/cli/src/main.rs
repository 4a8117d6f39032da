fn main() {
    std::process::exit(segforge_cli::run(std::env::args_os()));
}
