//! `key = value` config files with `[section]` headers. Keys name long flags.
//! Top-level keys apply to whichever subcommand accepts them; keys under
//! `[name]` apply only to subcommand `name`.

use clap::Command;
use std::collections::BTreeMap;

#[derive(Debug, Default, PartialEq)]
pub struct ConfigFile {
    pub top: Vec<(String, String)>,
    pub sections: BTreeMap<String, Vec<(String, String)>>,
}

pub fn parse(text: &str) -> Result<ConfigFile, String> {
    let mut cfg = ConfigFile::default();
    let mut section: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| format!("line {}: unterminated section header", i + 1))?
                .trim();
            if name.is_empty() {
                return Err(format!("line {}: empty section name", i + 1));
            }
            cfg.sections.entry(name.to_string()).or_default();
            section = Some(name.to_string());
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected `key = value`", i + 1))?;
        let key = k.trim().replace('_', "-");
        if key.is_empty() {
            return Err(format!("line {}: empty key", i + 1));
        }
        let value = v.trim().trim_matches('"').to_string();
        match &section {
            Some(s) => cfg.sections.get_mut(s).unwrap().push((key, value)),
            None => cfg.top.push((key, value)),
        }
    }
    Ok(cfg)
}

fn arg_of<'a>(cmd: &'a Command, key: &str) -> Option<&'a clap::Arg> {
    cmd.get_arguments().find(|a| a.get_long() == Some(key))
}

fn to_flags(arg: &clap::Arg, key: &str, value: &str) -> Result<Vec<String>, String> {
    if arg.get_action().takes_values() {
        return Ok(vec![format!("--{key}"), value.to_string()]);
    }
    match value {
        "true" | "yes" | "on" | "1" => Ok(vec![format!("--{key}")]),
        "false" | "no" | "off" | "0" => Ok(vec![]),
        other => Err(format!("`{key}` is a switch; expected true or false, got `{other}`")),
    }
}

/// Validates every key against `root` and returns the flags to inject for
/// subcommand `active`.
pub fn flags_for(cfg: &ConfigFile, root: &Command, active: &str) -> Result<Vec<String>, String> {
    let globals: Vec<&clap::Arg> = root.get_arguments().filter(|a| a.is_global_set()).collect();
    let find = |cmd: &Command, key: &str| -> Option<clap::Arg> {
        arg_of(cmd, key)
            .or_else(|| globals.iter().copied().find(|a| a.get_long() == Some(key)))
            .cloned()
    };
    let mut out = Vec::new();
    for (key, value) in &cfg.top {
        let known = root.get_subcommands().any(|s| find(s, key).is_some());
        if !known {
            return Err(format!("unknown config key `{key}`"));
        }
        if let Some(arg) = root.find_subcommand(active).and_then(|s| find(s, key)) {
            out.extend(to_flags(&arg, key, value)?);
        }
    }
    for (name, entries) in &cfg.sections {
        let sub = root
            .find_subcommand(name)
            .ok_or_else(|| format!("unknown config section `[{name}]`"))?;
        for (key, value) in entries {
            let arg = find(sub, key).ok_or_else(|| format!("unknown config key `{key}` in section `[{name}]`"))?;
            let flags = to_flags(&arg, key, value)?;
            if name == active {
                out.extend(flags);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::{Arg, ArgAction};

    fn cli() -> Command {
        Command::new("asc")
            .arg(Arg::new("threads").long("threads").global(true))
            .subcommand(
                Command::new("cv")
                    .arg(Arg::new("ratio").long("ratio"))
                    .arg(Arg::new("evaluate").long("evaluate").action(ArgAction::SetTrue)),
            )
            .subcommand(Command::new("synth").arg(Arg::new("seed").long("seed")))
    }

    #[test]
    fn sections_and_comments_parse() {
        let cfg = parse("# comment\nseed = 7\n[cv]\nratio = 0.01  # inline\nevaluate = true\n").unwrap();
        assert_eq!(cfg.top, vec![("seed".to_string(), "7".to_string())]);
        assert_eq!(cfg.sections["cv"].len(), 2);
    }

    #[test]
    fn flags_target_the_active_subcommand() {
        let cfg = parse("seed = 7\nthreads = 2\n[cv]\nratio = 0.01\nevaluate = true\n").unwrap();
        let cv = flags_for(&cfg, &cli(), "cv").unwrap();
        assert_eq!(cv, ["--threads", "2", "--ratio", "0.01", "--evaluate"]);
        let synth = flags_for(&cfg, &cli(), "synth").unwrap();
        assert_eq!(synth, ["--seed", "7", "--threads", "2"]);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = flags_for(&parse("bogus = 1").unwrap(), &cli(), "cv").unwrap_err();
        assert!(err.contains("`bogus`"), "{err}");
        let err = flags_for(&parse("[cv]\nseed = 1").unwrap(), &cli(), "cv").unwrap_err();
        assert!(err.contains("`seed`") && err.contains("[cv]"), "{err}");
        let err = flags_for(&parse("[nope]\n").unwrap(), &cli(), "cv").unwrap_err();
        assert!(err.contains("[nope]"));
    }

    #[test]
    fn malformed_lines_rejected() {
        assert!(parse("just words").is_err());
        assert!(parse("[open").is_err());
        assert!(flags_for(&parse("[cv]\nevaluate = maybe").unwrap(), &cli(), "cv").is_err());
    }
}
