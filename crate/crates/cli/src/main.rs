fn main() {
    let argv: Vec<String> = std::env::args().collect();
    std::process::exit(villa_cli::run_cli(&argv));
}
