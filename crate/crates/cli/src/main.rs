fn main() {
    std::process::exit(bilevel_gr_cli::cli_main(std::env::args_os()));
}
