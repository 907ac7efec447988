use std::ffi::OsString;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};

/// `key=value` lines; `#` starts a comment, blank lines are ignored.
pub fn parse_config(text: &str, origin: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split_once('#').map_or(raw, |(l, _)| l).trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("{}:{}: expected key=value", origin.display(), i + 1);
        };
        let key = key.trim().trim_start_matches("--").replace('_', "-");
        if key.is_empty() || key == "config" {
            bail!("{}:{}: invalid key `{}`", origin.display(), i + 1, key);
        }
        out.push((key, value.trim().to_string()));
    }
    Ok(out)
}

/// Flags for the config entries. Booleans become bare flags when true and
/// are dropped when false; list values may repeat their key.
pub fn config_flags(entries: &[(String, String)]) -> Vec<OsString> {
    let mut flags = Vec::new();
    for (key, value) in entries {
        match value.as_str() {
            "true" => flags.push(format!("--{key}").into()),
            "false" => {}
            _ => {
                flags.push(format!("--{key}").into());
                flags.push(value.into());
            }
        }
    }
    flags
}

/// Position of `--config` in `args` and its value, if present.
fn find_config(args: &[OsString]) -> Option<(usize, usize, OsString)> {
    for (i, a) in args.iter().enumerate() {
        let s = a.to_string_lossy();
        if s == "--" {
            break;
        }
        if s == "--config" {
            return args.get(i + 1).map(|v| (i, 2, v.clone()));
        }
        if let Some(v) = s.strip_prefix("--config=") {
            return Some((i, 1, v.into()));
        }
    }
    None
}

/// Insert flags from the `--config` file right after the subcommand, so
/// flags given on the command line (which come later) take precedence.
pub fn expand_args(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some((at, width, path)) = find_config(&args) else {
        return Ok(args);
    };
    let path = Path::new(&path);
    let text = fs::read_to_string(path).with_context(|| format!("reading config file {}", path.display()))?;
    let flags = config_flags(&parse_config(&text, path)?);
    let mut rest: Vec<OsString> = args;
    rest.drain(at..at + width);
    let Some(sub) = rest.iter().skip(1).position(|a| !a.to_string_lossy().starts_with('-')) else {
        return Ok(rest);
    };
    let insert_at = sub + 2;
    rest.splice(insert_at..insert_at, flags);
    Ok(rest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn parses_pairs_and_comments() {
        let got = parse_config("# run\nseed = 7\nno_rl=true\n\nrounds=10 # short\n", Path::new("c")).unwrap();
        assert_eq!(
            got,
            vec![
                ("seed".to_string(), "7".to_string()),
                ("no-rl".to_string(), "true".to_string()),
                ("rounds".to_string(), "10".to_string())
            ]
        );
        assert!(parse_config("seed 7", Path::new("c")).is_err());
    }

    #[test]
    fn flags_from_entries() {
        let e = vec![("seed".into(), "7".into()), ("no-rl".into(), "true".into()), ("dry-run".into(), "false".into())];
        assert_eq!(config_flags(&e), os(&["--seed", "7", "--no-rl"]));
    }

    #[test]
    fn config_flags_precede_command_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        fs::write(&path, "seed=3\nrounds=5\n").unwrap();
        let p = path.to_str().unwrap();
        let got = expand_args(os(&["kgprompt", "--config", p, "train-bandit", "--seed", "9"])).unwrap();
        assert_eq!(got, os(&["kgprompt", "train-bandit", "--seed", "3", "--rounds", "5", "--seed", "9"]));
        let got = expand_args(os(&["kgprompt", "evaluate", &format!("--config={p}")])).unwrap();
        assert_eq!(got, os(&["kgprompt", "evaluate", "--seed", "3", "--rounds", "5"]));
    }
}
