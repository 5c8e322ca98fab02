fn main() {
    std::process::exit(embl::harness::cli_dispatch(std::env::args_os()));
}
