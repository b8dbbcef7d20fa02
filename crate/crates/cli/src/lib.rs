//! Command-line front end: every configuration key has exactly one flag,
//! owned by the subcommand that consumes it (or global).

mod commands;

use std::ffi::OsString;
use std::path::PathBuf;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Arg, ArgAction, ArgMatches, Command};
use pointillist::config::RunConfig;

/// A configuration-backed flag. `command: None` marks a global flag.
#[derive(Debug, Clone, Copy)]
pub struct ConfigFlag {
    pub command: Option<&'static str>,
    pub flag: &'static str,
    pub key: &'static str,
    pub help: &'static str,
}

const fn f(command: Option<&'static str>, flag: &'static str, key: &'static str, help: &'static str) -> ConfigFlag {
    ConfigFlag {
        command,
        flag,
        key,
        help,
    }
}

const G: Option<&str> = None;
const SYNTH: Option<&str> = Some("synth");
const TRAIN_AR: Option<&str> = Some("train-ar");
const SAMPLE: Option<&str> = Some("sample");
const TRAIN_DEC: Option<&str> = Some("train-decoder");
const EVAL: Option<&str> = Some("eval");

pub const CONFIG_FLAGS: &[ConfigFlag] = &[
    f(G, "seed", "seed", "Run seed; every command is deterministic given it"),
    f(G, "threads", "threads", "Worker threads (1 keeps outputs byte-reproducible)"),
    f(G, "data", "data.root", "Dataset root (default: $POINTILLIST_DATA, then ./data)"),
    f(SYNTH, "identities", "data.identities", "Number of identities to generate"),
    f(SYNTH, "first-seed", "data.first_seed", "Seed of the first identity; the rest follow consecutively"),
    f(SYNTH, "template-seed", "template.seed", "Seed of the procedural head template"),
    f(SYNTH, "faces", "template.faces", "Template face count (20·4^k)"),
    f(SYNTH, "joints", "template.joints", "Template joints: root, neck, jaw (1-3)"),
    f(SYNTH, "expressions", "template.expressions", "Number of expression blendshapes"),
    f(SYNTH, "min-points", "synth.min_points", "Smallest per-identity point count"),
    f(SYNTH, "max-points", "synth.max_points", "Largest per-identity point count"),
    f(SYNTH, "hair-multiplier", "synth.hair_multiplier", "Hair density relative to skin (>= 2)"),
    f(SYNTH, "beard-multiplier", "synth.beard_multiplier", "Beard density relative to skin (>= 2)"),
    f(SYNTH, "hair-height", "synth.hair_height", "Largest off-surface offset of hair points"),
    f(SYNTH, "beard-probability", "synth.beard_probability", "Chance that an identity has a beard"),
    f(SYNTH, "image-size", "synth.image_size", "Square target and conditioning image side"),
    f(SYNTH, "focal", "synth.focal", "Camera focal length in pixels"),
    f(SYNTH, "camera-radius", "synth.camera_radius", "Distance of the camera ring from the origin"),
    f(SYNTH, "elevation", "synth.elevation", "Camera elevation in degrees"),
    f(SYNTH, "cameras", "synth.cameras", "Cameras on the ring (4-8); camera 0 is frontal"),
    f(SYNTH, "posed-frames", "synth.posed_frames", "Animated frames after the rest pose (>= 2)"),
    f(SYNTH, "coord-levels", "synth.coord_levels", "Coordinate quantization levels"),
    f(SYNTH, "test-fraction", "synth.test_fraction", "Fraction of identities held out by seed hash"),
    f(TRAIN_AR, "d-model", "ar.d_model", "Transformer width"),
    f(TRAIN_AR, "layers", "ar.layers", "Transformer layers"),
    f(TRAIN_AR, "heads", "ar.heads", "Attention heads"),
    f(TRAIN_AR, "window", "ar.window", "Context window in tokens"),
    f(TRAIN_AR, "stride", "ar.stride", "Sliding-window stride in tokens"),
    f(TRAIN_AR, "patch", "ar.patch", "Image patch side for the condition encoder"),
    f(TRAIN_AR, "anchors", "ar.anchors", "Point-encoder anchors"),
    f(TRAIN_AR, "steps", "train_ar.steps", "Optimizer steps (0 writes the initial model)"),
    f(TRAIN_AR, "lr", "train_ar.lr", "Peak learning rate"),
    f(TRAIN_AR, "batch", "train_ar.batch", "Sequences per step (0 = all)"),
    f(TRAIN_AR, "weight-decay", "train_ar.weight_decay", "Decoupled weight decay"),
    f(TRAIN_AR, "warmup", "train_ar.warmup", "Linear warmup steps"),
    f(TRAIN_AR, "final-lr-fraction", "train_ar.final_lr_fraction", "Cosine floor as a fraction of lr"),
    f(TRAIN_AR, "clip-norm", "train_ar.clip_norm", "Global gradient-norm clip (0 disables)"),
    f(TRAIN_AR, "log-every", "train_ar.log_every", "Log the loss every N steps (0 disables)"),
    f(SAMPLE, "temp", "ar.temperature", "Sampling temperature (0 = greedy)"),
    f(SAMPLE, "topk", "ar.top_k", "Keep the k most likely tokens (0 = all)"),
    f(SAMPLE, "constrained", "ar.constrained", "Mask tokens that would break the grammar"),
    f(SAMPLE, "point-cap", "ar.point_cap", "Largest number of sampled points"),
    f(SAMPLE, "split", "sample.split", "Identities to sample: train, test or all"),
    f(SAMPLE, "limit", "sample.limit", "Sample at most this many identities (0 = all)"),
    f(TRAIN_DEC, "d-model", "decoder.d_model", "Decoder width"),
    f(TRAIN_DEC, "layers", "decoder.layers", "Decoder layers"),
    f(TRAIN_DEC, "heads", "decoder.heads", "Decoder attention heads"),
    f(TRAIN_DEC, "pe-freqs", "decoder.pe_freqs", "Positional-encoding frequencies per axis"),
    f(TRAIN_DEC, "max-offset", "decoder.max_offset", "Bound on the predicted offset norm"),
    f(TRAIN_DEC, "variant", "decoder.variant", "Decoder input: full, positional, ar-feature or template"),
    f(TRAIN_DEC, "image-attention", "decoder.image_attention", "Cross-attend to source-image patches"),
    f(TRAIN_DEC, "l1-weight", "loss.l1", "Weight of the L1 term"),
    f(TRAIN_DEC, "ssim-weight", "loss.ssim", "Weight of the SSIM term"),
    f(TRAIN_DEC, "perceptual-weight", "loss.perceptual", "Weight of the perceptual term (stubbed to 0)"),
    f(TRAIN_DEC, "offset-weight", "loss.offset", "Weight of the offset regularizer"),
    f(TRAIN_DEC, "steps", "train_decoder.steps", "Optimizer steps"),
    f(TRAIN_DEC, "lr", "train_decoder.lr", "Peak learning rate"),
    f(TRAIN_DEC, "batch", "train_decoder.batch", "Identities per step (0 = all)"),
    f(TRAIN_DEC, "weight-decay", "train_decoder.weight_decay", "Decoupled weight decay"),
    f(TRAIN_DEC, "warmup", "train_decoder.warmup", "Linear warmup steps"),
    f(TRAIN_DEC, "final-lr-fraction", "train_decoder.final_lr_fraction", "Cosine floor as a fraction of lr"),
    f(TRAIN_DEC, "clip-norm", "train_decoder.clip_norm", "Global gradient-norm clip (0 disables)"),
    f(TRAIN_DEC, "log-every", "train_decoder.log_every", "Log the loss every N steps (0 disables)"),
    f(TRAIN_DEC, "train-views", "views.train", "Rest-pose cameras to train on, comma separated"),
    f(EVAL, "eval-views", "views.eval", "Cameras to score, comma separated"),
];

/// Flags that name files rather than configuration values.
pub const IO_FLAGS: &[&str] = &["config", "out", "ar", "decoder", "samples", "text"];

pub const COMMANDS: &[&str] = &[
    "synth",
    "encode",
    "decode",
    "validate",
    "train-ar",
    "sample",
    "train-decoder",
    "animate",
    "render",
    "eval",
];

fn default_value(key: &str) -> toml::Value {
    let root = toml::Value::try_from(RunConfig::default()).expect("config serializes");
    key.split('.')
        .try_fold(&root, |v, k| v.get(k))
        .unwrap_or_else(|| panic!("flag table names unknown key {key}"))
        .clone()
}

fn config_arg(flag: &ConfigFlag) -> Arg {
    let help = format!("{} [config: {}]", flag.help, flag.key);
    let arg = Arg::new(flag.key).long(flag.flag).help(help);
    match default_value(flag.key) {
        toml::Value::Boolean(_) => arg
            .value_name("BOOL")
            .num_args(0..=1)
            .require_equals(true)
            .default_missing_value("true"),
        toml::Value::Array(_) => arg.value_name("LIST"),
        toml::Value::Integer(_) => arg.value_name("N"),
        toml::Value::Float(_) => arg.value_name("X"),
        _ => arg.value_name("VALUE"),
    }
}

fn path_arg(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name)
        .long(name)
        .value_name("PATH")
        .value_parser(clap::value_parser!(PathBuf))
        .help(help)
}

fn input(help: &'static str) -> Arg {
    Arg::new("input")
        .value_name("INPUT")
        .required(true)
        .value_parser(clap::value_parser!(PathBuf))
        .help(help)
}

fn output(help: &'static str) -> Arg {
    Arg::new("output")
        .value_name("OUTPUT")
        .required(true)
        .value_parser(clap::value_parser!(PathBuf))
        .help(help)
}

fn subcommand(name: &'static str) -> Command {
    let (about, io): (&str, Vec<Arg>) = match name {
        "synth" => ("Generate the synthetic dataset under the data root", vec![]),
        "encode" => (
            "Tokenize a BPC1 cloud into TOK1",
            vec![
                input("BPC1 point cloud"),
                output("Token file"),
                Arg::new("text")
                    .long("text")
                    .action(ArgAction::SetTrue)
                    .help("Write the one-token-per-line text form instead of TOK1"),
            ],
        ),
        "decode" => (
            "Detokenize a TOK1 (or token text) file into a BPC1 cloud",
            vec![input("TOK1 or token text file"), output("BPC1 point cloud")],
        ),
        "validate" => (
            "Check a token sequence against the grammar (exit 1 if it is malformed)",
            vec![input("TOK1 or token text file")],
        ),
        "train-ar" => (
            "Train the autoregressive model on the training split",
            vec![path_arg("out", "Checkpoint to write (CKPT1)").required(true)],
        ),
        "sample" => (
            "Sample point clouds for dataset identities and summarize grammar validity",
            vec![
                path_arg("ar", "Autoregressive checkpoint").required(true),
                path_arg("out", "Directory for the samples").required(true),
            ],
        ),
        "train-decoder" => (
            "Train the Gaussian decoder against rest-pose renders; needs a frozen AR checkpoint",
            vec![
                path_arg("ar", "Frozen autoregressive checkpoint (required)"),
                path_arg("out", "Checkpoint to write (CKPT1)").required(true),
            ],
        ),
        "animate" => (
            "Decode sampled clouds into Gaussians and pose them along each identity's track",
            vec![
                path_arg("ar", "Autoregressive checkpoint").required(true),
                path_arg("decoder", "Decoder checkpoint").required(true),
                path_arg("samples", "Directory written by `sample`").required(true),
            ],
        ),
        "render" => (
            "Render every posed frame from every dataset camera (IMG1 and P6)",
            vec![path_arg("samples", "Directory written by `animate`").required(true)],
        ),
        "eval" => (
            "Score renders against the dataset views and write a metric=value report",
            vec![
                path_arg("samples", "Directory written by `render`").required(true),
                path_arg("out", "Metric report to write").required(true),
            ],
        ),
        _ => unreachable!("unknown command {name}"),
    };
    let mut cmd = Command::new(name).about(about).args(io);
    for flag in CONFIG_FLAGS.iter().filter(|f| f.command == Some(name)) {
        cmd = cmd.arg(config_arg(flag));
    }
    cmd
}

pub fn command() -> Command {
    let mut cmd = Command::new("pointillist")
        .about("Autoregressive Gaussian-splat head avatars: data, training, sampling, animation and rendering")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .after_help(
            "Exit codes: 0 success, 1 validation failure, 2 I/O error.\n\
             Logs go to standard error (RUST_LOG adjusts the level).",
        )
        .arg(path_arg("config", "TOML run configuration; unknown keys are rejected").global(true));
    for flag in CONFIG_FLAGS.iter().filter(|f| f.command.is_none()) {
        cmd = cmd.arg(config_arg(flag).global(true));
    }
    for name in COMMANDS {
        cmd = cmd.subcommand(subcommand(name));
    }
    cmd
}

fn parse_value(template: &toml::Value, raw: &str, key: &str) -> Result<toml::Value> {
    let bad = |e: &dyn std::fmt::Display| anyhow!(Invalid(format!("--{key}: cannot parse {raw:?}: {e}")));
    Ok(match template {
        toml::Value::Integer(_) => toml::Value::Integer(raw.parse().map_err(|e| bad(&e))?),
        toml::Value::Float(_) => toml::Value::Float(raw.parse().map_err(|e| bad(&e))?),
        toml::Value::Boolean(_) => toml::Value::Boolean(raw.parse().map_err(|e| bad(&e))?),
        toml::Value::Array(_) => toml::Value::Array(
            raw.split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| s.trim().parse().map(toml::Value::Integer).map_err(|e| bad(&e)))
                .collect::<Result<_>>()?,
        ),
        _ => toml::Value::String(raw.to_string()),
    })
}

/// Sets one dotted key in a serialized configuration tree.
pub fn set_key(root: &mut toml::Value, key: &str, raw: &str) -> Result<()> {
    let mut node = root;
    let mut parts = key.split('.').peekable();
    while let Some(part) = parts.next() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| anyhow!(Invalid(format!("config key {key} is not a table path"))))?;
        if parts.peek().is_none() {
            let slot = table
                .get_mut(part)
                .ok_or_else(|| anyhow!(Invalid(format!("unknown config key {key}"))))?;
            *slot = parse_value(slot, raw, key)?;
            return Ok(());
        }
        node = table
            .get_mut(part)
            .ok_or_else(|| anyhow!(Invalid(format!("unknown config key {key}"))))?;
    }
    Ok(())
}

/// Loads `--config` (or the defaults) and applies every flag given on the
/// command line. Validation is left to the caller.
pub fn resolve_config(top: &ArgMatches, sub: &ArgMatches, command: &str) -> Result<RunConfig> {
    let mut cfg = match top.get_one::<PathBuf>("config").or_else(|| sub.get_one::<PathBuf>("config")) {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let mut tree = toml::Value::try_from(&cfg).context("serializing the configuration")?;
    let mut touched = false;
    for flag in CONFIG_FLAGS
        .iter()
        .filter(|f| f.command.is_none() || f.command == Some(command))
    {
        // global flags may appear before or after the subcommand
        let raw = sub
            .try_get_one::<String>(flag.key)
            .ok()
            .flatten()
            .or_else(|| top.try_get_one::<String>(flag.key).ok().flatten());
        if let Some(raw) = raw {
            set_key(&mut tree, flag.key, raw)?;
            touched = true;
        }
    }
    if touched {
        cfg = tree
            .try_into()
            .map_err(|e: toml::de::Error| anyhow!(Invalid(e.to_string())))?;
    }
    Ok(cfg)
}

/// A validation failure (exit code 1) that is not a library error.
#[derive(Debug)]
pub struct Invalid(pub String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

/// 2 for I/O failures anywhere in the chain, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<std::io::Error>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<pointillist::Error>() {
            if matches!(e, pointillist::Error::Io { .. } | pointillist::Error::RawIo(_)) {
                return 2;
            }
        }
    }
    1
}

/// Runs the tool on `args` (including the program name) and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&matches) {
        Ok(()) => 0,
        Err(e) => {
            log::error!("{e:#}");
            exit_code(&e)
        }
    }
}

fn dispatch(top: &ArgMatches) -> Result<()> {
    let (name, sub) = top.subcommand().ok_or_else(|| anyhow!(Invalid("no command given".into())))?;
    let cfg = resolve_config(top, sub, name)?;
    cfg.validate()?;
    match name {
        "synth" => commands::synth(&cfg),
        "encode" => commands::encode(&cfg, sub),
        "decode" => commands::decode(&cfg, sub),
        "validate" => commands::validate(&cfg, sub),
        "train-ar" => commands::train_ar(&cfg, sub),
        "sample" => commands::sample(&cfg, sub),
        "train-decoder" => commands::train_decoder(&cfg, sub),
        "animate" => commands::animate(&cfg, sub),
        "render" => commands::render(&cfg, sub),
        "eval" => commands::eval(&cfg, sub),
        other => bail!(Invalid(format!("unknown command {other}"))),
    }
}
