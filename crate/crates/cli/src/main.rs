fn main() {
    std::process::exit(sgseg_cli::run(std::env::args_os()));
}
