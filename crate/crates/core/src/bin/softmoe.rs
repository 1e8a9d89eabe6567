fn main() {
    std::process::exit(softmoe::cli::parse_and_dispatch(std::env::args_os()));
}
