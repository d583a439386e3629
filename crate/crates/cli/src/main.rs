fn main() {
    std::process::exit(rotavg_cli::main_with_args(std::env::args_os()));
}
