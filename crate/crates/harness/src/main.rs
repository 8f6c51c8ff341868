fn main() {
    std::process::exit(rlhf_harness::cli::main_with_args(std::env::args_os()));
}
