//! Declarative stage chains.
//!
//! A configuration is a TOML file with an optional `run_dir` and a list of
//! `[[stage]]` tables. `name` picks the subcommand; every other key becomes
//! the flag of the same name with `_` spelled `-`:
//!
//! ```toml
//! run_dir = "run"
//!
//! [[stage]]
//! name = "ensemble"
//! inputs = ["generalist_a.csv", "generalist_b.csv", "expert_0.csv"]
//!
//! [[stage]]
//! name = "drop-small-masks"
//! min_area = 1600
//!
//! [[stage]]
//! name = "trim"
//! max_bytes = 5000000000
//!
//! [[stage]]
//! name = "eval"
//! gt = "ground_truth.csv"
//! verification = "verification.csv"
//! mode = "mask"
//! ```
//!
//! Input paths are relative to the configuration file; a leading `@run/`
//! points into the run directory instead. Output paths are relative to the
//! run directory. A stage that consumes predictions and names no input
//! reads the previous stage's prediction output; outputs that are not given
//! default to `NN-<stage>.csv` in the run directory, `NN` being the 1-based
//! stage number. Every input not produced by an earlier stage must exist
//! before the first stage starts.
//!
//! After the run, `manifest.json` in the run directory lists each stage
//! with its arguments, inputs, outputs, parameters, captured standard
//! output and status. Paths in the manifest use the configuration syntax
//! above, so it does not change when the run directory moves.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Parser;
use serde::Serialize;

use crate::files::{write_atomic, ConfigError};
use crate::{commands, error_line, Cli, Command, PipelineArgs};

pub const MANIFEST_NAME: &str = "manifest.json";
const RUN_PREFIX: &str = "@run/";

const INPUT_KEYS: &[&str] = &[
    "input",
    "inputs",
    "predictions",
    "gt",
    "verification",
    "hierarchy",
    "rois",
    "labels",
    "logits",
    "stats",
    "embeddings",
    "group_file",
    "categories",
];

struct Shape {
    /// Input key fed from the previous stage's predictions.
    chain_in: Option<&'static str>,
    /// Whether the first output is a prediction file for the next stage.
    chain_out: bool,
    /// Output keys and the suffix of their default file names.
    outputs: &'static [(&'static str, &'static str)],
}

fn shape(name: &str) -> Option<Shape> {
    const OUT: &[(&str, &str)] = &[("output", ".csv")];
    let s = |chain_in, chain_out, outputs| {
        Some(Shape {
            chain_in,
            chain_out,
            outputs,
        })
    };
    match name {
        "nms" | "restrict" | "drop-small-masks" => s(Some("input"), true, OUT),
        "ensemble" => s(Some("inputs"), true, OUT),
        "trim" => s(
            Some("input"),
            true,
            &[("output", ".csv"), ("report", "-report.csv")],
        ),
        "eval" => s(Some("predictions"), false, &[("report", ".csv")]),
        "assign" | "sample-rois" | "split-experts" | "lr" => s(None, false, OUT),
        "loss" => s(None, false, &[]),
        "partition-pool" => s(None, false, &[("output_dir", "")]),
        "filter-expert" => s(
            None,
            false,
            &[
                ("output_gt", "-gt.csv"),
                ("output_verification", "-verification.csv"),
                ("output_images", "-images.csv"),
            ],
        ),
        _ => None,
    }
}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    ConfigError::Invalid(msg.into()).into()
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Role {
    Input,
    Output,
}

/// One argument value with the path it stands for, if any.
struct Value {
    text: String,
    path: Option<(PathBuf, Role)>,
}

struct Stage {
    index: usize,
    name: String,
    params: BTreeMap<String, serde_json::Value>,
    /// Flag (or `None` for positional) and its values.
    args: Vec<(Option<String>, Vec<Value>)>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    command: Command,
}

#[derive(Serialize)]
struct StageRecord {
    index: usize,
    name: String,
    args: Vec<String>,
    inputs: Vec<String>,
    outputs: Vec<String>,
    params: BTreeMap<String, serde_json::Value>,
    status: &'static str,
    stdout: String,
    error: Option<String>,
}

#[derive(Serialize)]
struct Manifest {
    status: &'static str,
    stages: Vec<StageRecord>,
}

fn scalar(key: &str, v: &toml::Value) -> anyhow::Result<Option<String>> {
    Ok(match v {
        toml::Value::String(s) => Some(s.clone()),
        toml::Value::Integer(i) => Some(i.to_string()),
        toml::Value::Float(f) => Some(f.to_string()),
        toml::Value::Boolean(true) => None,
        _ => return Err(invalid(format!("unsupported value for `{key}`"))),
    })
}

struct Layout {
    config_dir: PathBuf,
    run_dir: PathBuf,
}

impl Layout {
    fn input(&self, s: &str) -> PathBuf {
        match s.strip_prefix(RUN_PREFIX) {
            Some(rest) => self.run_dir.join(rest),
            None => self.config_dir.join(s),
        }
    }

    /// Path in configuration syntax, independent of where the run lives.
    fn show(&self, p: &Path, role: Role) -> String {
        if let Ok(rest) = p.strip_prefix(&self.run_dir) {
            let rest = rest.to_string_lossy();
            return match role {
                Role::Input => format!("{RUN_PREFIX}{rest}"),
                Role::Output => rest.into_owned(),
            };
        }
        pathdiff::diff_paths(p, &self.config_dir)
            .unwrap_or_else(|| p.to_path_buf())
            .to_string_lossy()
            .into_owned()
    }
}

fn plan_stage(
    index: usize,
    table: &toml::Table,
    layout: &Layout,
    prev_predictions: Option<&Path>,
) -> anyhow::Result<Stage> {
    let name = match table.get("name") {
        Some(toml::Value::String(s)) => s.clone(),
        _ => return Err(invalid(format!("stage {index} needs a string `name`"))),
    };
    let shape =
        shape(&name).ok_or_else(|| invalid(format!("stage {index}: unknown stage `{name}`")))?;
    let mut params = BTreeMap::new();
    let mut args = Vec::new();
    let mut inputs = Vec::new();
    let mut outputs = Vec::new();
    let is_output = |k: &str| shape.outputs.iter().any(|(o, _)| *o == k);

    for (key, value) in table {
        if key == "name" {
            continue;
        }
        if key == "threads" {
            return Err(invalid(format!(
                "stage {index}: set --threads on the pipeline command"
            )));
        }
        params.insert(key.clone(), serde_json::to_value(value)?);
        let items: Vec<&toml::Value> = match value {
            toml::Value::Array(a) => a.iter().collect(),
            toml::Value::Boolean(false) => continue,
            v => vec![v],
        };
        let mut values = Vec::new();
        for item in items {
            let Some(text) = scalar(key, item)? else {
                values.clear();
                break;
            };
            let path = if INPUT_KEYS.contains(&key.as_str()) {
                let p = layout.input(&text);
                inputs.push(p.clone());
                Some((p, Role::Input))
            } else if is_output(key) {
                let p = layout.run_dir.join(&text);
                outputs.push(p.clone());
                Some((p, Role::Output))
            } else {
                None
            };
            values.push(Value { text, path });
        }
        let flag = (key != "inputs" || name != "ensemble").then(|| key.clone());
        args.push((flag, values));
    }

    if let Some(key) = shape.chain_in {
        if !table.contains_key(key) {
            let prev = prev_predictions.ok_or_else(|| {
                invalid(format!("stage {index} ({name}) has no `{key}` and no earlier stage produces predictions"))
            })?;
            inputs.insert(0, prev.to_path_buf());
            let flag = (key != "inputs").then(|| key.to_owned());
            let text = layout.show(prev, Role::Input);
            args.push((
                flag,
                vec![Value {
                    text,
                    path: Some((prev.to_path_buf(), Role::Input)),
                }],
            ));
        }
    }
    for (key, suffix) in shape.outputs {
        if table.contains_key(*key) {
            continue;
        }
        let file = format!("{index:02}-{name}{suffix}");
        let p = layout.run_dir.join(&file);
        outputs.push(p.clone());
        args.push((
            Some((*key).to_owned()),
            vec![Value {
                text: file,
                path: Some((p, Role::Output)),
            }],
        ));
    }
    // Keep the primary output first so chaining picks it.
    if let Some((primary, _)) = shape.outputs.first() {
        let primary_path = args
            .iter()
            .find(|(f, _)| f.as_deref() == Some(*primary))
            .and_then(|(_, v)| v.first())
            .and_then(|v| v.path.as_ref().map(|(p, _)| p.clone()));
        if let Some(p) = primary_path {
            outputs.retain(|o| *o != p);
            outputs.insert(0, p);
        }
    }

    let mut argv: Vec<String> = vec!["fedkit".into(), name.clone()];
    argv.extend(render(&args, |p, _| p.to_string_lossy().into_owned()));
    let cli = Cli::try_parse_from(&argv).map_err(|e| {
        let msg = e.to_string();
        let first = msg
            .lines()
            .find(|l| !l.trim().is_empty())
            .unwrap_or("invalid arguments");
        invalid(format!(
            "stage {index} ({name}): {}",
            first.trim_start_matches("error: ")
        ))
    })?;
    commands::validate(&cli.command).with_context(|| format!("stage {index} ({name})"))?;
    Ok(Stage {
        index,
        name,
        params,
        args,
        inputs,
        outputs,
        command: cli.command,
    })
}

/// Flags and values in order, paths rendered with `path`.
fn render(
    args: &[(Option<String>, Vec<Value>)],
    path: impl Fn(&Path, Role) -> String,
) -> Vec<String> {
    let mut argv = Vec::new();
    for (flag, values) in args {
        let flag = flag.as_ref().map(|f| format!("--{}", f.replace('_', "-")));
        if values.is_empty() {
            argv.extend(flag.clone());
        }
        for v in values {
            argv.extend(flag.clone());
            argv.push(match &v.path {
                Some((p, role)) => path(p, *role),
                None => v.text.clone(),
            });
        }
    }
    argv
}

fn display_args(stage: &Stage, layout: &Layout) -> Vec<String> {
    let mut argv = vec![stage.name.clone()];
    argv.extend(render(&stage.args, |p, role| layout.show(p, role)));
    argv
}

fn load_config(path: &Path) -> anyhow::Result<toml::Table> {
    let text = std::fs::read_to_string(path)
        .map_err(|_| ConfigError::MissingFile(path.display().to_string()))?;
    text.parse::<toml::Table>()
        .map_err(|e| invalid(format!("{}: {}", path.display(), e.message())))
}

pub fn run_pipeline(args: &PipelineArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let config_path = std::path::absolute(&args.config)?;
    let config = load_config(&config_path)?;
    let config_dir = config_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();

    for key in config.keys() {
        if key != "run_dir" && key != "stage" {
            return Err(invalid(format!("unknown top-level key `{key}`")));
        }
    }
    let run_dir = match (&args.run_dir, config.get("run_dir")) {
        (Some(d), _) => std::path::absolute(d)?,
        (None, Some(toml::Value::String(d))) => config_dir.join(d),
        (None, Some(_)) => return Err(invalid("`run_dir` must be a string")),
        (None, None) => return Err(invalid("no run directory: set `run_dir` or pass --run-dir")),
    };
    let layout = Layout {
        config_dir,
        run_dir,
    };

    let tables = match config.get("stage") {
        Some(toml::Value::Array(a)) if !a.is_empty() => a,
        _ => return Err(invalid("configuration has no [[stage]] entries")),
    };
    let mut stages = Vec::with_capacity(tables.len());
    let mut prev: Option<PathBuf> = None;
    for (i, t) in tables.iter().enumerate() {
        let t = t
            .as_table()
            .ok_or_else(|| invalid(format!("stage {} is not a table", i + 1)))?;
        let stage = plan_stage(i + 1, t, &layout, prev.as_deref())?;
        if shape(&stage.name).is_some_and(|s| s.chain_out) {
            prev = stage.outputs.first().cloned();
        }
        stages.push(stage);
    }

    // Inputs must exist unless an earlier stage writes them.
    let mut produced: Vec<&Path> = Vec::new();
    for stage in &stages {
        for input in &stage.inputs {
            let made = produced.iter().any(|p| input.starts_with(p));
            if !made && !input.exists() {
                return Err(ConfigError::MissingFile(input.display().to_string()).into());
            }
        }
        produced.extend(stage.outputs.iter().map(PathBuf::as_path));
    }

    std::fs::create_dir_all(&layout.run_dir)
        .with_context(|| format!("creating {}", layout.run_dir.display()))?;
    let mut records: Vec<StageRecord> = stages
        .iter()
        .map(|s| StageRecord {
            index: s.index,
            name: s.name.clone(),
            args: display_args(s, &layout),
            inputs: s
                .inputs
                .iter()
                .map(|p| layout.show(p, Role::Input))
                .collect(),
            outputs: s
                .outputs
                .iter()
                .map(|p| layout.show(p, Role::Output))
                .collect(),
            params: s.params.clone(),
            status: "pending",
            stdout: String::new(),
            error: None,
        })
        .collect();

    let mut failure = None;
    for (stage, record) in stages.iter().zip(records.iter_mut()) {
        if failure.is_some() {
            record.status = "skipped";
            continue;
        }
        let mut captured = Vec::new();
        let result = commands::execute(&stage.command, &mut captured)
            .with_context(|| format!("stage {} ({})", stage.index, stage.name));
        out.write_all(&captured)?;
        record.stdout = String::from_utf8_lossy(&captured).into_owned();
        match result {
            Ok(()) => record.status = "succeeded",
            Err(e) => {
                record.status = "failed";
                record.error = Some(error_line(&e));
                failure = Some(e);
            }
        }
    }
    let manifest = Manifest {
        status: if failure.is_some() {
            "failed"
        } else {
            "succeeded"
        },
        stages: records,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    write_atomic(&layout.run_dir.join(MANIFEST_NAME), |w| {
        w.write_all(json.as_bytes())?;
        w.write_all(b"\n")?;
        Ok(())
    })?;
    failure.map_or(Ok(()), Err)
}
