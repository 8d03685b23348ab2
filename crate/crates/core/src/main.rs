fn main() -> std::process::ExitCode {
    gaze_forge::cli::main_with_args(std::env::args_os())
}
