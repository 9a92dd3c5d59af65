fn main() {
    std::process::exit(scpt::cli::run(std::env::args_os()));
}
