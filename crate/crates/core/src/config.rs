//! Plain-text `key = value` files.
//!
//! Every config consumer takes the keys it understands out of a
//! [`KeyValues`] and then calls [`KeyValues::finish`], which rejects any key
//! left over. Unknown keys are therefore always fatal.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct KeyValues {
    origin: String,
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("{origin}:{}: expected `key = value`", lineno + 1))
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::config(format!("{origin}:{}: empty key", lineno + 1)));
            }
            if entries.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(Error::config(format!("{origin}:{}: duplicate key `{key}`", lineno + 1)));
            }
        }
        Ok(KeyValues { origin: origin.to_string(), entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Insert or replace a key; used for command-line overrides.
    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn take_str(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|_| {
                Error::config(format!("{}: cannot parse `{key} = {v}`", self.origin))
            }),
        }
    }

    pub fn take_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        Ok(self.take(key)?.unwrap_or(default))
    }

    /// Comma-separated list.
    pub fn take_list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>> {
        let Some(v) = self.entries.remove(key) else {
            return Ok(None);
        };
        v.split(',')
            .map(|s| s.trim().parse::<T>())
            .collect::<std::result::Result<Vec<T>, _>>()
            .map(Some)
            .map_err(|_| Error::config(format!("{}: cannot parse list `{key} = {v}`", self.origin)))
    }

    pub fn take_array<T: FromStr + Copy, const N: usize>(&mut self, key: &str) -> Result<Option<[T; N]>> {
        let origin = self.origin.clone();
        match self.take_list::<T>(key)? {
            None => Ok(None),
            Some(v) => <[T; N]>::try_from(v.as_slice()).map(Some).map_err(|_| {
                Error::config(format!("{origin}: `{key}` expects {N} comma-separated values"))
            }),
        }
    }

    /// Fails if any key was not consumed.
    pub fn finish(self) -> Result<()> {
        if self.entries.is_empty() {
            return Ok(());
        }
        let keys: Vec<&str> = self.entries.keys().map(String::as_str).collect();
        Err(Error::config(format!("{}: unknown key(s): {}", self.origin, keys.join(", "))))
    }
}

/// Ordered writer for resolved configuration files.
#[derive(Debug, Default)]
pub struct KvWriter {
    out: String,
}

impl KvWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn comment(&mut self, text: &str) -> &mut Self {
        let _ = writeln!(self.out, "# {text}");
        self
    }

    pub fn put(&mut self, key: &str, value: impl std::fmt::Display) -> &mut Self {
        let _ = writeln!(self.out, "{key} = {value}");
        self
    }

    pub fn put_list<T: std::fmt::Display>(&mut self, key: &str, values: &[T]) -> &mut Self {
        let joined: Vec<String> = values.iter().map(|v| v.to_string()).collect();
        self.put(key, joined.join(","))
    }

    pub fn finish(&self) -> String {
        self.out.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_lists() {
        let mut kv = KeyValues::parse("# header\na = 1\nb=2.5 # trailing\n\nc = 1,2,3\n", "t").unwrap();
        assert_eq!(kv.take::<u32>("a").unwrap(), Some(1));
        assert_eq!(kv.take::<f64>("b").unwrap(), Some(2.5));
        assert_eq!(kv.take_array::<i32, 3>("c").unwrap(), Some([1, 2, 3]));
        kv.finish().unwrap();
    }

    #[test]
    fn unknown_keys_are_fatal() {
        let mut kv = KeyValues::parse("a = 1\nbogus = 2\n", "t").unwrap();
        kv.take::<u32>("a").unwrap();
        let err = kv.finish().unwrap_err();
        assert!(err.to_string().contains("bogus"));
    }

    #[test]
    fn duplicate_and_malformed_lines() {
        assert!(KeyValues::parse("a = 1\na = 2\n", "t").is_err());
        assert!(KeyValues::parse("just text\n", "t").is_err());
        let mut kv = KeyValues::parse("a = x\n", "t").unwrap();
        assert!(kv.take::<f64>("a").is_err());
    }
}
