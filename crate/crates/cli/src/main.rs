fn main() {
    std::process::exit(fgdisc_cli::run(std::env::args_os()));
}
