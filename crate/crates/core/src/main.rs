fn main() {
    std::process::exit(scenemixer::cli::run(std::env::args_os()));
}
