// Shared by several integration targets; not every target uses every
// helper.
#![allow(dead_code)]

use std::path::Path;
use std::process::Output;

/// Runs the packaged binary with a scrubbed CONVNORM_EPS, extra env
/// pairs applied on top.
pub fn run_bin(args: &[&str], envs: &[(&str, &str)], cwd: Option<&Path>) -> Output {
    let mut cmd = std::process::Command::new(env!("CARGO_BIN_EXE_convnorm"));
    cmd.args(args).env_remove("CONVNORM_EPS");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    if let Some(dir) = cwd {
        cmd.current_dir(dir);
    }
    cmd.output().expect("binary spawns")
}

pub fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("no signal termination")
}

pub fn stdout_text(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn stderr_text(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}
