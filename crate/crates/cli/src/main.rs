fn main() {
    std::process::exit(bmsprt_cli::main_with_args(std::env::args_os()));
}
