fn main() {
    std::process::exit(ternary_dit::cli::run(std::env::args_os()));
}
