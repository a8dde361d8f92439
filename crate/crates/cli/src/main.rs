fn main() {
    std::process::exit(isolayer_cli::run_from(std::env::args_os()));
}
