fn main() -> std::process::ExitCode {
    clustr::cli::main()
}
