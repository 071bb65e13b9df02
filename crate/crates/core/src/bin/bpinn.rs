fn main() {
    std::process::exit(bpinn::cli::main_with_args(std::env::args_os()));
}
