fn main() {
    std::process::exit(deepmil::cli::run(std::env::args_os()));
}
