fn main() {
    std::process::exit(d3fields_cli::run(std::env::args_os()));
}
