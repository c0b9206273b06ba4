fn main() -> std::process::ExitCode {
    levyap::cli::main()
}
