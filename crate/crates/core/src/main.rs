fn main() {
    std::process::exit(hypercut::cli::run(std::env::args_os()));
}
