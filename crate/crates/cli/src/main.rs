fn main() {
    std::process::exit(rat_cli::run(std::env::args_os()));
}
