fn main() {
    std::process::exit(keypointgan::cli_main());
}
