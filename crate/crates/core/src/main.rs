fn main() {
    std::process::exit(protoseq::cli::run(std::env::args_os()));
}
