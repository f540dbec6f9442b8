fn main() {
    std::process::exit(vlsched_harness::cli::run(std::env::args_os()));
}
