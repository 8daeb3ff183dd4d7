fn main() {
    std::process::exit(lesionloc_cli::run(std::env::args_os()));
}
