fn main() -> std::process::ExitCode {
    plugdit::cli::main()
}
