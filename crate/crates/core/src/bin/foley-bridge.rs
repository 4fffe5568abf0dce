fn main() {
    std::process::exit(foley_bridge::cli::run(std::env::args_os()));
}
