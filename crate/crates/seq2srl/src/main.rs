fn main() -> std::process::ExitCode {
    seq2srl::cli::main()
}
