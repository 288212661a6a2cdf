fn main() {
    std::process::exit(trajdiff_cli::main_with(std::env::args_os()));
}
