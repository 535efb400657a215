fn main() {
    std::process::exit(htm_cli::run(std::env::args_os()));
}
