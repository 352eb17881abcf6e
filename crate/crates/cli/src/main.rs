fn main() {
    std::process::exit(danet_cli::run(std::env::args_os()));
}
