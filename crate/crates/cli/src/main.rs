fn main() {
    std::process::exit(ecgwm::commands::run(std::env::args_os()));
}
