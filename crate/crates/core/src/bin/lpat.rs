fn main() {
    std::process::exit(lpat::cli::main_with(std::env::args_os()));
}
