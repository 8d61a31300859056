fn main() {
    std::process::exit(infobottle_cli::run(std::env::args_os()));
}
