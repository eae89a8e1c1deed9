fn main() {
    std::process::exit(stts_ead::cli::main_with_args(std::env::args_os()));
}
