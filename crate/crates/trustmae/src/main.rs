fn main() {
    std::process::exit(trustmae::cli::dispatch(std::env::args()));
}
