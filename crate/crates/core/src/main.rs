fn main() {
    std::process::exit(cxrl::cli::run_cli(std::env::args_os()));
}
