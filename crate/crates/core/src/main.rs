fn main() {
    std::process::exit(spatialedit::cli::run(std::env::args_os()));
}
