//! Line-oriented `key = value` configuration files with `#` comments.
//! Later assignments win, and callers layer command-line flags on top.

use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Config {
    map: BTreeMap<String, String>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::invalid(format!("config line {}: expected `key = value`", i + 1))
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::invalid(format!("config line {}: empty key", i + 1)));
            }
            map.insert(key.to_string(), value.trim().to_string());
        }
        Ok(Self { map })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    /// Parses the value under `key` if present; a malformed value is an
    /// error rather than a silent fallback.
    pub fn get_parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|_| {
                Error::invalid(format!("config key {key}: cannot parse value {v:?}"))
            }),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

/// Flag > config file > default resolution for one setting.
pub fn resolve<T: FromStr + Clone>(
    flag: Option<T>,
    cfg: &Config,
    key: &str,
    default: T,
) -> Result<T> {
    if let Some(v) = flag {
        return Ok(v);
    }
    Ok(cfg.get_parsed::<T>(key)?.unwrap_or(default))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_keys_comments_and_blanks() {
        let c = Config::parse("# top\n\nlr = 1e-4\n  epochs=50  # trailing\nloss = nt_xent\n")
            .unwrap();
        assert_eq!(c.get("lr"), Some("1e-4"));
        assert_eq!(c.get("epochs"), Some("50"));
        assert_eq!(c.get("loss"), Some("nt_xent"));
        assert_eq!(c.get("missing"), None);
    }

    #[test]
    fn later_assignment_wins() {
        let c = Config::parse("k = 1\nk = 3\n").unwrap();
        assert_eq!(c.get("k"), Some("3"));
    }

    #[test]
    fn malformed_lines_rejected() {
        assert!(Config::parse("just words\n").is_err());
        assert!(Config::parse("= 5\n").is_err());
        let err = Config::parse("ok = 1\nbad line\n").unwrap_err();
        assert!(err.to_string().contains("line 2"));
    }

    #[test]
    fn typed_access_and_precedence() {
        let c = Config::parse("epochs = 20\nlr = 1e-3\n").unwrap();
        assert_eq!(c.get_parsed::<usize>("epochs").unwrap(), Some(20));
        assert!(c.get_parsed::<usize>("lr").is_err());
        // Flag beats file beats default.
        assert_eq!(resolve(Some(7usize), &c, "epochs", 50).unwrap(), 7);
        assert_eq!(resolve(None::<usize>, &c, "epochs", 50).unwrap(), 20);
        assert_eq!(resolve(None::<usize>, &c, "batch", 32).unwrap(), 32);
    }
}
