fn main() {
    std::process::exit(ipstride::cli::dispatch(std::env::args_os()));
}
