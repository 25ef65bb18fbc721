fn main() {
    std::process::exit(gtc::cli::main_with_args(std::env::args_os()));
}
