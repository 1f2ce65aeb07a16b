fn main() {
    let argv: Vec<String> = std::env::args().collect();
    std::process::exit(gamcast_cli::run(argv));
}
