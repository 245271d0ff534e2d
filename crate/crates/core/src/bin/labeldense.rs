fn main() {
    std::process::exit(labeldense::cli::run(std::env::args_os()));
}
