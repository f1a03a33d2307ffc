fn main() {
    std::process::exit(vec2sent::cli::run(std::env::args_os()));
}
