#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::Command;

pub fn bundled(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join(name)
}

pub fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

pub struct Output {
    pub code: Option<i32>,
    pub stdout: String,
    pub stderr: String,
}

impl Output {
    pub fn ok(&self) -> bool {
        self.code == Some(0)
    }

    pub fn assert_ok(&self) -> &Self {
        assert!(self.ok(), "exit {:?}\nstderr: {}", self.code, self.stderr);
        self
    }
}

pub fn densecrab(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_densecrab"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs");
    Output {
        code: out.status.code(),
        stdout: String::from_utf8(out.stdout).unwrap(),
        stderr: String::from_utf8(out.stderr).unwrap(),
    }
}

/// The bundled example config with absolute data paths and the given
/// dotted-key overrides, written to `dir/config.toml`.
pub fn write_config(dir: &Path, overrides: &[(&str, toml::Value)]) -> PathBuf {
    let mut cfg: toml::Table = read(&bundled("example.toml")).parse().unwrap();
    let abs = |v: &mut toml::Value| {
        let p = bundled(v.as_str().unwrap());
        *v = toml::Value::String(p.to_str().unwrap().to_string());
    };
    for s in cfg["data"]["sources"].as_array_mut().unwrap() {
        abs(s);
    }
    for d in cfg["ablate"]["datasets"].as_array_mut().unwrap() {
        for key in ["corpus", "queries", "qrels"] {
            abs(&mut d[key]);
        }
    }
    for (key, value) in overrides {
        let mut parts: Vec<&str> = key.split('.').collect();
        let last = parts.pop().unwrap();
        let mut t = &mut cfg;
        for p in parts {
            t = t
                .entry(p)
                .or_insert_with(|| toml::Value::Table(Default::default()))
                .as_table_mut()
                .unwrap();
        }
        t.insert(last.to_string(), value.clone());
    }
    let path = dir.join("config.toml");
    std::fs::write(&path, toml::to_string(&cfg).unwrap()).unwrap();
    path
}
