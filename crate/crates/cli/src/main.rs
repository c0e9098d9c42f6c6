fn main() {
    std::process::exit(albumfill_cli::cli::main_with_args(std::env::args_os()));
}
