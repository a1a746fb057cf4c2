fn main() {
    std::process::exit(flowsculpt_cli::cli::run(std::env::args_os()));
}
