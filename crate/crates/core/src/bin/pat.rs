fn main() {
    std::process::exit(pat_core::cli::dispatch(std::env::args_os()));
}
