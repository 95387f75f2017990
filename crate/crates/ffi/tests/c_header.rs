//! Compiles and runs a small C program against the generated header and the
//! static library. Skipped when no C compiler is on the PATH.

use std::path::{Path, PathBuf};
use std::process::Command;

const PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "bowlkit.h"

int main(void) {
    float data[6] = {1.0f, 0.0f, 0.0f, 1.0f, 0.98f, 0.02f};
    BowlExemplarSet *set = NULL;
    if (bowl_exemplar_set_build(data, 3, 2, 0.5f, &set) != BOWL_STATUS_OK) return 1;
    if (bowl_exemplar_set_len(set) != 2) return 2;
    float q[2] = {0.0f, 2.0f};
    float s = 0.0f;
    if (bowl_exemplar_set_s_max(set, q, 1, &s) != BOWL_STATUS_OK || s != 1.0f) return 3;
    bowl_exemplar_set_free(set);
    BowlBox a = {0, 0, 2, 2}, b = {1, 0, 2, 2};
    double v = bowl_iou(a, b);
    if (v < 0.333 || v > 0.334) return 4;
    if (bowl_exemplar_set_build(data, 3, 2, 2.0f, &set) != BOWL_STATUS_CONFIG) return 5;
    if (strlen(bowl_last_error_message()) == 0) return 6;
    printf("%s\n", bowl_version());
    return 0;
}
"#;

fn compiler() -> Option<&'static str> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| Command::new(c).arg("--version").output().is_ok())
}

/// `cargo test` only builds the rlib, so build the static library into a
/// separate target directory to stay clear of the running build's lock.
fn static_lib() -> PathBuf {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let target = manifest.join("../../target/c-abi-test");
    let cargo = std::env::var("CARGO").unwrap_or_else(|_| "cargo".into());
    let status = Command::new(cargo)
        .args(["build", "--quiet", "-p", "bowlkit-ffi", "--manifest-path"])
        .arg(manifest.join("Cargo.toml"))
        .arg("--target-dir")
        .arg(&target)
        .status()
        .unwrap();
    assert!(status.success(), "building the static library failed");
    target.join("debug/libbowlkit_ffi.a")
}

#[test]
fn c_program_links_and_runs() {
    let Some(cc) = compiler() else {
        eprintln!("no C compiler found, skipping");
        return;
    };
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let lib = static_lib();
    assert!(lib.exists(), "missing {}", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    let exe = dir.path().join("main");
    std::fs::write(&src, PROGRAM).unwrap();
    let status = Command::new(cc)
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(&include)
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C build failed");
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "C program exited with {:?}", out.status.code());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), env!("CARGO_PKG_VERSION"));
}
