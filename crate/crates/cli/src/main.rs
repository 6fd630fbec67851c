fn main() {
    std::process::exit(fdylka_cli::dispatch(std::env::args_os()));
}
