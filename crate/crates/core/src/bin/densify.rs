fn main() {
    std::process::exit(densify::cli::run_command(std::env::args_os()));
}
