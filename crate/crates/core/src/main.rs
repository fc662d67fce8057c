fn main() {
    std::process::exit(tpgan::cli::run(std::env::args_os()));
}
