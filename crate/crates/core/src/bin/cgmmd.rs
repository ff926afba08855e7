fn main() {
    std::process::exit(cgmmd::cli::run(std::env::args_os()));
}
