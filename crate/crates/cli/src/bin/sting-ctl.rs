fn main() -> std::process::ExitCode {
    sting_cli::main_ctl(std::env::args_os())
}
