fn main() -> std::process::ExitCode {
    kinevae_cli::main_with(std::env::args_os())
}
