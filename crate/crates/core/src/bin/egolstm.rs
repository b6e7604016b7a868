fn main() {
    std::process::exit(egolstm::cli::dispatch(std::env::args_os()));
}
