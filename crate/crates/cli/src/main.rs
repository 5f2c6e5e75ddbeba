fn main() {
    std::process::exit(lava_cli::run(std::env::args_os()));
}
