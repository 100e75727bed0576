fn main() -> std::process::ExitCode {
    geosep::cli::main()
}
