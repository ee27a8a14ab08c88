fn main() {
    std::process::exit(au_spread::cli::cli_dispatch(std::env::args_os()));
}
