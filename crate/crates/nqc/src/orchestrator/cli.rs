//! Command-line front end. Placeholder while the subcommands are built.

pub fn run() -> u8 {
    0
}
