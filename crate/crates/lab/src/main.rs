fn main() {
    std::process::exit(feedback_lab::cli::main_with(std::env::args_os()));
}
