fn main() {
    std::process::exit(lowlight_pose::cli::run(std::env::args_os()));
}
