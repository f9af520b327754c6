fn main() {
    std::process::exit(lamformer::cli::main_with(std::env::args_os()));
}
