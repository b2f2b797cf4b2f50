fn main() {
    std::process::exit(rotreg::run(std::env::args_os()));
}
