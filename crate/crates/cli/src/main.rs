fn main() {
    std::process::exit(platerim::run(std::env::args_os()));
}
