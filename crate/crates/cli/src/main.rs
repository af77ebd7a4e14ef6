fn main() {
    std::process::exit(rolekit_cli::run(std::env::args_os()));
}
