fn main() {
    std::process::exit(fragsim_cli::dispatch(std::env::args_os()));
}
