fn main() -> std::process::ExitCode {
    rave::cli::main()
}
