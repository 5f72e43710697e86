fn main() {
    std::process::exit(hyperfcl::harness::cli::cli_main(std::env::args_os()));
}
