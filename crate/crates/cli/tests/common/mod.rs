//! Helpers shared by the integration tests of the command-line tool.

#![allow(dead_code)]

pub mod oracle;

use std::path::Path;
use std::process::{Command, Output};

pub fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_barrier-pac"))
}

pub fn run(args: &[&str]) -> Output {
    binary().args(args).output().expect("failed to launch the binary")
}

pub fn repo_file(relative: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .join(relative)
        .to_string_lossy()
        .into_owned()
}

pub fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}
