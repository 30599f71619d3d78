fn main() {
    std::process::exit(mala::cli::run(std::env::args_os()));
}
