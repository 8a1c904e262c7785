fn main() {
    std::process::exit(clinex::cli::main_with(std::env::args_os()));
}
