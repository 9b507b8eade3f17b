fn main() {
    std::process::exit(capsroute_cli::run(std::env::args_os()));
}
