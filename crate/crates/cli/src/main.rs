fn main() {
    std::process::exit(ttm_cli::main_with(std::env::args_os()));
}
