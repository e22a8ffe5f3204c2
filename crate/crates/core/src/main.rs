fn main() {
    std::process::exit(varident::cli::main_from(std::env::args_os()));
}
