fn main() {
    std::process::exit(gradleak::runner::cli_main(std::env::args()));
}
