fn main() -> std::process::ExitCode {
    crackclf::cli::run(std::env::args().collect())
}
