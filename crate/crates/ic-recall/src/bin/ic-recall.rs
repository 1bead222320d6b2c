fn main() {
    std::process::exit(ic_recall::cli::main_with_args(std::env::args_os()));
}
