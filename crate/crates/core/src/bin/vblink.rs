fn main() -> std::process::ExitCode {
    vblink::cli::main()
}
