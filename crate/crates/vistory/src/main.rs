fn main() {
    std::process::exit(vistory::cli::main_with_args(std::env::args_os()));
}
