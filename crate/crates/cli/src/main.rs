fn main() {
    std::process::exit(dxloop_cli::run(std::env::args_os()));
}
