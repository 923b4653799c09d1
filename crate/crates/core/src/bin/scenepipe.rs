fn main() {
    std::process::exit(scenepipe_core::cli::main_from(std::env::args_os()));
}
