fn main() {
    std::process::exit(evenhancer::cli::run(std::env::args_os()));
}
