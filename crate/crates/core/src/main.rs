fn main() {
    std::process::exit(hotelrec::cli::main_with_args(std::env::args_os()));
}
