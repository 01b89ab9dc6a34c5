fn main() {
    std::process::exit(chemolab::cli::run_cli(std::env::args_os()));
}
