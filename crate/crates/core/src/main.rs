fn main() {
    std::process::exit(pulse_core::cli::main_with_args(std::env::args_os()));
}
