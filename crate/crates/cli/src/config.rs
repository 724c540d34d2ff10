//! Flat `key = value` run configuration.
//!
//! Values come from, in increasing precedence: command defaults, the
//! `--config` file, `--set key=value` overrides, and the dedicated flags.
//! Every key is checked against the command's schema before anything runs,
//! and the resolved set is written next to the outputs so a rerun from that
//! file reproduces them.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use popmove::{Error, Result};

pub const EFFECTIVE_CONFIG: &str = "config.txt";

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Kind {
    UInt,
    Float,
    /// Comma-separated floats.
    FloatList,
    Bool,
    Path,
    /// Comma-separated paths.
    PathList,
    Choice(&'static [&'static str]),
    /// A float or `auto`.
    FloatOrAuto,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Default {
    Required,
    Optional,
    Value(&'static str),
}

#[derive(Debug, Clone, Copy)]
pub struct Key {
    pub name: &'static str,
    pub kind: Kind,
    pub default: Default,
}

pub const fn key(name: &'static str, kind: Kind, default: Default) -> Key {
    Key { name, kind, default }
}

/// Parses `key = value` lines. `#` starts a comment.
pub fn parse_text(text: &str, origin: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Format {
            path: origin.to_path_buf(),
            msg: format!("line {}: expected `key = value`", i + 1),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn parse_assignment(s: &str) -> Result<(String, String)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| Error::InvalidParameter(format!("`--set {s}` is not of the form key=value")))
}

fn check_value(key: &Key, value: &str) -> Result<()> {
    let bad = |what: &str| Error::InvalidParameter(format!("{}: `{value}` is not {what}", key.name));
    let float = |s: &str| s.trim().parse::<f64>().ok().filter(|v| v.is_finite());
    match key.kind {
        Kind::UInt => value.parse::<u64>().map(|_| ()).map_err(|_| bad("a nonnegative integer")),
        Kind::Float => float(value).map(|_| ()).ok_or_else(|| bad("a finite number")),
        Kind::FloatOrAuto => {
            if value == "auto" || float(value).is_some() {
                Ok(())
            } else {
                Err(bad("a number or `auto`"))
            }
        }
        Kind::FloatList => {
            if !value.is_empty() && value.split(',').all(|v| float(v).is_some()) {
                Ok(())
            } else {
                Err(bad("a comma-separated list of numbers"))
            }
        }
        Kind::Bool => match value {
            "true" | "false" => Ok(()),
            _ => Err(bad("`true` or `false`")),
        },
        Kind::Path | Kind::PathList => {
            if value.is_empty() {
                Err(bad("a path"))
            } else {
                Ok(())
            }
        }
        Kind::Choice(options) => {
            if options.contains(&value) {
                Ok(())
            } else {
                Err(bad(&format!("one of {}", options.join(", "))))
            }
        }
    }
}

/// Validated settings of one command.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    command: String,
    values: BTreeMap<String, String>,
}

impl RunConfig {
    /// Resolves `assignments` (in increasing precedence) against `schema`.
    pub fn resolve(command: &str, schema: &[Key], assignments: &[(String, String)]) -> Result<Self> {
        let mut values = BTreeMap::new();
        for k in schema {
            if let Default::Value(v) = k.default {
                values.insert(k.name.to_string(), v.to_string());
            }
        }
        for (name, value) in assignments {
            if !schema.iter().any(|k| k.name == name) {
                let known: Vec<&str> = schema.iter().map(|k| k.name).collect();
                return Err(Error::InvalidParameter(format!(
                    "`{name}` is not a setting of {command} (known: {})",
                    known.join(", ")
                )));
            }
            values.insert(name.clone(), value.clone());
        }
        for k in schema {
            match values.get(k.name) {
                Some(v) => check_value(k, v)?,
                None if k.default == Default::Required => {
                    return Err(Error::InvalidParameter(format!("{command} needs `{}`", k.name)));
                }
                None => {}
            }
        }
        Ok(RunConfig {
            command: command.to_string(),
            values,
        })
    }

    fn raw(&self, name: &str) -> Result<&str> {
        self.values
            .get(name)
            .map(String::as_str)
            .ok_or_else(|| Error::InvalidParameter(format!("{} needs `{name}`", self.command)))
    }

    pub fn has(&self, name: &str) -> bool {
        self.values.contains_key(name)
    }

    pub fn uint(&self, name: &str) -> Result<usize> {
        self.raw(name)?
            .parse()
            .map_err(|_| Error::InvalidParameter(format!("{name} is not an integer")))
    }

    pub fn u64(&self, name: &str) -> Result<u64> {
        self.raw(name)?
            .parse()
            .map_err(|_| Error::InvalidParameter(format!("{name} is not an integer")))
    }

    pub fn float(&self, name: &str) -> Result<f64> {
        self.raw(name)?
            .trim()
            .parse()
            .map_err(|_| Error::InvalidParameter(format!("{name} is not a number")))
    }

    /// `None` for `auto`.
    pub fn float_or_auto(&self, name: &str) -> Result<Option<f64>> {
        match self.raw(name)? {
            "auto" => Ok(None),
            _ => self.float(name).map(Some),
        }
    }

    pub fn floats(&self, name: &str) -> Result<Vec<f64>> {
        self.raw(name)?
            .split(',')
            .map(|v| {
                v.trim()
                    .parse()
                    .map_err(|_| Error::InvalidParameter(format!("{name} holds a non-number")))
            })
            .collect()
    }

    /// A list of length `dim`; a single value is repeated.
    pub fn floats_of_len(&self, name: &str, dim: usize) -> Result<Vec<f64>> {
        let v = self.floats(name)?;
        match v.len() {
            1 => Ok(vec![v[0]; dim]),
            n if n == dim => Ok(v),
            n => Err(Error::Dimension(format!("{name} has {n} values but {dim} are needed"))),
        }
    }

    pub fn boolean(&self, name: &str) -> Result<bool> {
        Ok(self.raw(name)? == "true")
    }

    pub fn path(&self, name: &str) -> Result<PathBuf> {
        self.raw(name).map(PathBuf::from)
    }

    pub fn optional_path(&self, name: &str) -> Option<PathBuf> {
        self.values.get(name).map(PathBuf::from)
    }

    pub fn paths(&self, name: &str) -> Result<Vec<PathBuf>> {
        Ok(self.raw(name)?.split(',').map(|p| PathBuf::from(p.trim())).collect())
    }

    pub fn text(&self, name: &str) -> Result<&str> {
        self.raw(name)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("# popmove {}\n", self.command);
        for (k, v) in &self.values {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(EFFECTIVE_CONFIG);
        fs::write(&path, self.to_text()).map_err(|source| Error::Io { path, source })
    }
}
