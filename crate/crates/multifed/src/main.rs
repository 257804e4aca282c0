fn main() {
    std::process::exit(multifed::expio::cli_run(std::env::args()));
}
