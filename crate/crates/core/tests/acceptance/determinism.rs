use std::fs;
use std::path::Path;
use std::process::Command;

use crate::{ensure, Outcome};

const CONFIG: &str = r#"
seed = 5

[dataset]
kind = "gaussian-mixture"
classes = 3
samples_per_class = 40
label_noise = 0.2

[teacher]
layer_sizes = [2, 16, 16, 3]
emulation = { mode = "label-interpolated", alpha = 0.3 }
[teacher.train]
epochs = 3
batch_size = 32

[student]
layer_sizes = [2, 8, 3]

[train]
method = "saad-c"
inner_loss = "fast-first-order"
epochs = 3
batch_size = 32
tas_every = 1

[avar]
splits = 2
repetitions = 2

[sweep]
param = "alpha"
values = [0.0, 1.0]
"#;

fn adlab(args: &[&str], dir: &Path) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_adlab"))
        .args(args)
        .current_dir(dir)
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    Ok(())
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .map(|rd| {
            rd.filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file())
                .map(|p| {
                    let name = p.file_name().unwrap().to_string_lossy().into_owned();
                    (name, fs::read(&p).unwrap_or_default())
                })
                .collect()
        })
        .unwrap_or_default();
    v.sort();
    v
}

pub fn run() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    fs::write(dir.path().join("exp.toml"), CONFIG).map_err(|e| e.to_string())?;
    let mut compared = 0;
    for format in ["csv", "structured"] {
        for cmd in ["gen-data", "train", "evaluate", "tas", "avar", "sweep"] {
            let (a, b) = (format!("a-{format}"), format!("b-{format}"));
            adlab(&[cmd, "--config", "exp.toml", "--out", &a, "--format", format], dir.path())?;
            adlab(&[cmd, "--config", "exp.toml", "--out", &b, "--format", format], dir.path())?;
            let (sa, sb) = (snapshot(&dir.path().join(&a)), snapshot(&dir.path().join(&b)));
            ensure!(sa.len() == sb.len(), "{cmd}: different artifact sets");
            for ((na, ba), (nb, bb)) in sa.iter().zip(&sb) {
                ensure!(na == nb, "{cmd}: artifact names differ ({na} vs {nb})");
                ensure!(ba == bb, "{cmd} --format {format}: {na} differs between reruns");
                compared += 1;
            }
        }
    }
    Ok(format!("6 subcommands × 2 formats rerun, {compared} artifact comparisons byte-identical"))
}

