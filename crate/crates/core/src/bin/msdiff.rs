fn main() {
    std::process::exit(msdiff::cli::run(std::env::args_os()));
}
