fn main() {
    std::process::exit(gridcert::run(std::env::args_os()));
}
