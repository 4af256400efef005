fn main() {
    std::process::exit(lesionseg::cli::dispatch(std::env::args()));
}
