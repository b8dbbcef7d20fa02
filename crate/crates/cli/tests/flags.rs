use std::collections::{BTreeMap, BTreeSet};

use pointillist::config::RunConfig;
use pointillist_cli::{command, resolve_config, CONFIG_FLAGS, COMMANDS, IO_FLAGS};

fn flatten(prefix: &str, v: &toml::Value, out: &mut BTreeMap<String, toml::Value>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        leaf => {
            out.insert(prefix.to_string(), leaf.clone());
        }
    }
}

fn leaves(cfg: &RunConfig) -> BTreeMap<String, toml::Value> {
    let mut out = BTreeMap::new();
    flatten("", &toml::Value::try_from(cfg).unwrap(), &mut out);
    out
}

/// Arguments that make each subcommand parse, besides the flag under test.
fn required(cmd: &str) -> Vec<&'static str> {
    match cmd {
        "encode" | "decode" => vec!["in", "out"],
        "validate" => vec!["in"],
        "train-ar" | "train-decoder" => vec!["--out", "x"],
        "sample" => vec!["--ar", "a", "--out", "x"],
        "animate" => vec!["--ar", "a", "--decoder", "d", "--samples", "s"],
        "render" => vec!["--samples", "s"],
        "eval" => vec!["--samples", "s", "--out", "x"],
        _ => vec![],
    }
}

fn resolve(cmd: &str, extra: &[String]) -> RunConfig {
    let mut args = vec!["pointillist".to_string(), cmd.to_string()];
    args.extend(required(cmd).into_iter().map(String::from));
    args.extend(extra.iter().cloned());
    let top = command().try_get_matches_from(&args).unwrap_or_else(|e| panic!("{args:?}: {e}"));
    let (name, sub) = top.subcommand().unwrap();
    resolve_config(&top, sub, name).unwrap()
}

fn changed(v: &toml::Value, key: &str) -> String {
    match v {
        toml::Value::Integer(i) => (i + 3).to_string(),
        toml::Value::Float(x) => (x + 0.25).to_string(),
        toml::Value::Boolean(b) => (!b).to_string(),
        toml::Value::Array(_) => "1,2".to_string(),
        toml::Value::String(_) => match key {
            "sample.split" => "test".into(),
            "decoder.variant" => "positional".into(),
            _ => "/elsewhere".into(),
        },
        other => panic!("unexpected value {other:?} for {key}"),
    }
}

#[test]
fn flags_and_config_keys_correspond_one_to_one() {
    let keys: BTreeSet<String> = leaves(&RunConfig::default()).into_keys().collect();
    let table: Vec<&str> = CONFIG_FLAGS.iter().map(|f| f.key).collect();
    let unique: BTreeSet<String> = table.iter().map(|k| k.to_string()).collect();
    assert_eq!(unique.len(), table.len(), "a key has two flags");
    assert_eq!(unique, keys);
    // a flag name never means two things within one command
    for cmd in COMMANDS {
        let mut seen = BTreeSet::new();
        for f in CONFIG_FLAGS.iter().filter(|f| f.command.is_none() || f.command == Some(cmd)) {
            assert!(seen.insert(f.flag), "--{} repeated on {cmd}", f.flag);
            assert!(!IO_FLAGS.contains(&f.flag));
        }
    }
}

#[test]
fn help_documents_every_flag() {
    let mut root = command();
    let top_help = root.render_long_help().to_string();
    for f in CONFIG_FLAGS.iter().filter(|f| f.command.is_none()) {
        assert!(top_help.contains(&format!("--{}", f.flag)), "--{} missing from top-level help", f.flag);
    }
    for cmd in COMMANDS {
        let sub = root.find_subcommand_mut(cmd).unwrap();
        let help = sub.render_long_help().to_string();
        for arg in sub.get_arguments() {
            if let Some(long) = arg.get_long() {
                assert!(help.contains(&format!("--{long}")), "--{long} missing from {cmd} help");
                let known = ["help", "version"].contains(&long)
                    || IO_FLAGS.contains(&long)
                    || CONFIG_FLAGS
                        .iter()
                        .any(|f| f.flag == long && (f.command.is_none() || f.command == Some(cmd)));
                assert!(known, "--{long} on {cmd} is neither a file flag nor a config flag");
            }
        }
        for f in CONFIG_FLAGS.iter().filter(|f| f.command == Some(cmd)) {
            assert!(help.contains(&format!("--{}", f.flag)), "--{} missing from {cmd} help", f.flag);
            assert!(help.contains(f.key), "{} missing from {cmd} help", f.key);
        }
    }
}

#[test]
fn each_flag_sets_exactly_its_key() {
    let base = leaves(&RunConfig::default());
    for f in CONFIG_FLAGS {
        let cmd = f.command.unwrap_or("synth");
        let value = changed(&base[f.key], f.key);
        let cfg = resolve(cmd, &[format!("--{}={value}", f.flag)]);
        let after = leaves(&cfg);
        let diff: Vec<&String> = base.keys().filter(|k| base[*k] != after[*k]).collect();
        assert_eq!(diff, vec![f.key], "--{}", f.flag);
    }
}

#[test]
fn global_flags_work_on_either_side_of_the_command() {
    let a = command().try_get_matches_from(["pointillist", "--seed", "9", "synth"]).unwrap();
    let b = command().try_get_matches_from(["pointillist", "synth", "--seed", "9"]).unwrap();
    for m in [a, b] {
        let (name, sub) = m.subcommand().unwrap();
        assert_eq!(resolve_config(&m, sub, name).unwrap().seed, 9);
    }
}

#[test]
fn bad_values_are_rejected() {
    for args in [
        vec!["pointillist", "train-ar", "--out", "x", "--steps", "many"],
        vec!["pointillist", "sample", "--ar", "a", "--out", "x", "--constrained=perhaps"],
    ] {
        let top = command().try_get_matches_from(&args).unwrap();
        let (name, sub) = top.subcommand().unwrap();
        assert!(resolve_config(&top, sub, name).is_err(), "{args:?}");
    }
    // a flag of one command is unknown to another
    assert!(command().try_get_matches_from(["pointillist", "synth", "--temp", "0.5"]).is_err());
}
