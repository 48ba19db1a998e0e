fn main() {
    std::process::exit(clipped_cbo::harness::main_with_args(std::env::args_os()));
}
