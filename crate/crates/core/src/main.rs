fn main() {
    std::process::exit(flowmc::cli::run(std::env::args_os()));
}
