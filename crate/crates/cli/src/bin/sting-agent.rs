fn main() -> std::process::ExitCode {
    sting_cli::main_agent(std::env::args_os())
}
