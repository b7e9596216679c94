//! Plain-text `key=value` files: one pair per line, `#` starts a comment.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Parsed pairs in file order; later duplicates override earlier ones.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    map: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key=value, got {raw:?}", i + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::config(format!("line {}: empty key", i + 1)));
            }
            map.insert(k.to_string(), v.trim().to_string());
        }
        Ok(KeyValues { map })
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.map.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn parse_or<V: std::str::FromStr>(&self, key: &str, default: V) -> Result<V> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::config(format!("invalid value {v:?} for '{key}'"))),
        }
    }

    pub fn require<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let v = self.get(key).ok_or_else(|| Error::config(format!("missing key '{key}'")))?;
        v.parse().map_err(|_| Error::config(format!("invalid value {v:?} for '{key}'")))
    }

    /// `AxB` (or a single `A` meaning `AxA`).
    pub fn size_or(&self, key: &str, default: (usize, usize)) -> Result<(usize, usize)> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => parse_size(v).ok_or_else(|| Error::config(format!("invalid size {v:?} for '{key}'"))),
        }
    }

    pub fn to_text(&self) -> String {
        self.map.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

pub fn parse_size(v: &str) -> Option<(usize, usize)> {
    match v.split_once('x') {
        Some((a, b)) => Some((a.trim().parse().ok()?, b.trim().parse().ok()?)),
        None => {
            let n = v.trim().parse().ok()?;
            Some((n, n))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_pairs_and_comments() {
        let kv = KeyValues::parse("# header\nmodel = hrenet\nlr=0.001 # inline\n\ncrop=16x320\n").unwrap();
        assert_eq!(kv.get("model"), Some("hrenet"));
        assert_eq!(kv.parse_or("lr", 0.0).unwrap(), 0.001);
        assert_eq!(kv.size_or("crop", (1, 1)).unwrap(), (16, 320));
        assert_eq!(kv.parse_or("iters", 7usize).unwrap(), 7);
        assert!(matches!(KeyValues::parse("oops"), Err(Error::Config(_))));
        assert!(matches!(kv.require::<usize>("model"), Err(Error::Config(_))));
    }
}
