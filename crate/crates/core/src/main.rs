fn main() {
    std::process::exit(alignlab::cli::run(std::env::args_os()));
}
