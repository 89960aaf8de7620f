fn main() {
    std::process::exit(selfsim::cli_io::cli_dispatch(std::env::args_os()));
}
