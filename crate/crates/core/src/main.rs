fn main() {
    std::process::exit(stam_reid::cli::run(std::env::args_os()));
}
