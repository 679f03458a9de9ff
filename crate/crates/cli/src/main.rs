fn main() {
    std::process::exit(p3s_cli::run(std::env::args_os()));
}
