fn main() {
    std::process::exit(balancekit::cli::run(std::env::args_os()));
}
