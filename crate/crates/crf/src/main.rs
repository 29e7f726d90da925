fn main() {
    std::process::exit(crf::cli::run(std::env::args_os()));
}
