fn main() {
    std::process::exit(moeut::cli::run(std::env::args_os()));
}
