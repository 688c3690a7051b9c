fn main() {
    std::process::exit(pnpmix::cli::run_cli(std::env::args_os()));
}
