fn main() {
    std::process::exit(romer_harness::cli_main(std::env::args_os()));
}
