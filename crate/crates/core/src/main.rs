fn main() {
    std::process::exit(mtcaption::cli::run(std::env::args_os()));
}
