fn main() {
    std::process::exit(hbnet_cli::run(std::env::args_os()));
}
