//! Drive the same pipeline the `adlab` binary uses from a TOML string:
//! generate data, train teacher and student, then audit TAS.

use adlab::experiment::{parse_config, Experiment, OutputFormat, RunOptions, Subcommand};

const CONFIG: &str = r#"
seed = 11

[dataset]
kind = "gaussian-mixture"
classes = 3
samples_per_class = 60

[teacher]
layer_sizes = [2, 32, 32, 3]
emulation = { mode = "temperature-sharpened", temperature = 0.5 }
[teacher.train]
epochs = 6

[student]
layer_sizes = [2, 16, 3]

[train]
method = "saad-c"
epochs = 6
beta = 0.5
"#;

fn main() -> adlab::Result<()> {
    let out = std::env::temp_dir().join("adlab-example");
    let opts = RunOptions { out: out.clone(), seed: None, format: OutputFormat::Structured };
    for cmd in [Subcommand::GenData, Subcommand::Train, Subcommand::Tas] {
        let mut exp = Experiment::new(parse_config(CONFIG)?, &opts)?;
        exp.run(cmd)?;
        for note in exp.notes() {
            println!("[{}] {note}", cmd.name());
        }
    }
    let manifest = std::fs::read_to_string(out.join("manifest.json")).unwrap_or_default();
    println!("{manifest}");
    println!("artifacts in {}", out.display());
    Ok(())
}
