fn main() {
    std::process::exit(rsbench_cli::run(std::env::args_os()));
}
