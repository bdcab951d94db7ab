fn main() {
    std::process::exit(rawspoof::cli::main_with_args(std::env::args_os()));
}
