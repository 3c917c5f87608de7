fn main() -> std::process::ExitCode {
    atdn::cli::main()
}
