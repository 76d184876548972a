fn main() {
    // CLI entry point; wired up in orchestrator::cli.
}
