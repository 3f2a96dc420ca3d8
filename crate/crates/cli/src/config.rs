//! Flat `key=value` run settings.
//!
//! Every setting resolves as command-line flag, then `--config` file, then
//! (for `seed` only) the `FACET_SEED` environment variable, then the built-in
//! default. Resolved values are recorded in order and written next to the
//! run's outputs, where `--config` can read them back.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::CliError;

pub const SEED_ENV: &str = "FACET_SEED";

#[derive(Debug, Default)]
pub struct Settings {
    file: BTreeMap<String, String>,
    origin: String,
    resolved: Vec<(String, String)>,
}

fn normalize(key: &str) -> String {
    key.trim().replace('-', "_")
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::io(p.display(), e))?;
                Self::parse(&text, &p.display().to_string())
            }
        }
    }

    /// Blank lines and lines starting with `#` are ignored.
    pub fn parse(text: &str, origin: &str) -> Result<Self, CliError> {
        let mut file = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("{origin}:{}: expected key=value", n + 1)))?;
            let key = normalize(k);
            if key.is_empty() {
                return Err(CliError::Usage(format!("{origin}:{}: empty key", n + 1)));
            }
            if file.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(CliError::Usage(format!("{origin}:{}: duplicate key {key:?}", n + 1)));
            }
        }
        Ok(Self {
            file,
            origin: origin.to_string(),
            resolved: Vec::new(),
        })
    }

    fn file_value<T>(&mut self, key: &str) -> Result<Option<T>, CliError>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.file.remove(key) {
            None => Ok(None),
            Some(raw) => raw.parse().map(Some).map_err(|e| {
                CliError::Usage(format!("{}: bad value {raw:?} for {key}: {e}", self.origin))
            }),
        }
    }

    fn record<T: Display>(&mut self, key: &str, value: &T) {
        self.resolved.push((key.to_string(), value.to_string()));
    }

    /// A setting that must end up with a value.
    pub fn get<T>(&mut self, key: &str, flag: Option<T>, default: Option<T>) -> Result<T, CliError>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        self.optional(key, flag)?
            .or(default)
            .inspect(|v| self.record(key, v))
            .ok_or_else(|| CliError::Usage(format!("missing required setting {:?}", key.replace('_', "-"))))
    }

    /// A setting that may stay unset; recorded only when set.
    pub fn opt<T>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>, CliError>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let v = self.optional(key, flag)?;
        if let Some(v) = &v {
            self.record(key, v);
        }
        Ok(v)
    }

    fn optional<T>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>, CliError>
    where
        T: FromStr,
        T::Err: Display,
    {
        let file_value = self.file_value(key)?;
        Ok(flag.or(file_value))
    }

    pub fn path(&mut self, key: &str, flag: Option<PathBuf>) -> Result<PathBuf, CliError> {
        self.get(key, flag.map(path_string), None).map(PathBuf::from)
    }

    pub fn opt_path(&mut self, key: &str, flag: Option<PathBuf>) -> Result<Option<PathBuf>, CliError> {
        Ok(self.opt(key, flag.map(path_string))?.map(PathBuf::from))
    }

    /// Like [`Settings::get`] with `FACET_SEED` consulted before the default.
    pub fn seed(&mut self, key: &str, flag: Option<u64>, default: u64) -> Result<u64, CliError> {
        let env = match std::env::var(SEED_ENV) {
            Ok(v) => Some(
                v.trim()
                    .parse::<u64>()
                    .map_err(|e| CliError::Usage(format!("{SEED_ENV}={v:?}: {e}")))?,
            ),
            Err(_) => None,
        };
        let flag = match flag {
            Some(f) => Some(f),
            None if self.file.contains_key(key) => None,
            None => env,
        };
        self.get(key, flag, Some(default))
    }

    /// Fails on config keys that no setting consumed.
    pub fn finish(&self) -> Result<(), CliError> {
        match self.file.keys().next() {
            None => Ok(()),
            Some(k) => Err(CliError::Usage(format!(
                "{}: unknown key {k:?} for this command",
                self.origin
            ))),
        }
    }

    pub fn render(&self) -> String {
        self.resolved
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// Writes the resolved settings to `<output>.config`.
    pub fn write_sidecar(&self, output: &Path) -> Result<PathBuf, CliError> {
        let path = sidecar_path(output, "config");
        fs::write(&path, self.render()).map_err(|e| CliError::io(path.display(), e))?;
        Ok(path)
    }
}

fn path_string(p: PathBuf) -> String {
    p.to_string_lossy().into_owned()
}

/// `<output>.<suffix>`, keeping the original extension.
pub fn sidecar_path(output: &Path, suffix: &str) -> PathBuf {
    let mut s: std::ffi::OsString = output.components().collect::<PathBuf>().into_os_string();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_beats_file_beats_default() {
        let mut s = Settings::parse("k = 7\nstep-size=0.25\n# comment\n\n", "c").unwrap();
        assert_eq!(s.get::<usize>("k", Some(3), Some(1)).unwrap(), 3);
        assert_eq!(s.get::<f64>("step_size", None, Some(1.0)).unwrap(), 0.25);
        assert_eq!(s.get::<usize>("epochs", None, Some(9)).unwrap(), 9);
        s.finish().unwrap();
        assert_eq!(s.render(), "k=3\nstep_size=0.25\nepochs=9\n");
    }

    #[test]
    fn rendered_settings_parse_back() {
        let mut s = Settings::default();
        s.get("sigma", Some(0.1f64), None).unwrap();
        s.get("accept", Some("monotone".to_string()), None).unwrap();
        let mut back = Settings::parse(&s.render(), "sidecar").unwrap();
        assert_eq!(back.get::<f64>("sigma", None, None).unwrap(), 0.1);
        assert_eq!(back.get::<String>("accept", None, None).unwrap(), "monotone");
    }

    #[test]
    fn unknown_duplicate_and_malformed_keys_are_usage_errors() {
        let s = Settings::parse("bogus=1", "c").unwrap();
        assert!(matches!(s.finish(), Err(CliError::Usage(_))));
        assert!(matches!(Settings::parse("a=1\na=2", "c"), Err(CliError::Usage(_))));
        assert!(matches!(Settings::parse("just words", "c"), Err(CliError::Usage(_))));
        let mut s = Settings::parse("k=many", "c").unwrap();
        assert!(matches!(s.get::<usize>("k", None, None), Err(CliError::Usage(_))));
    }

    #[test]
    fn missing_required_setting_is_reported() {
        let mut s = Settings::default();
        assert!(matches!(s.path("out", None), Err(CliError::Usage(_))));
        assert_eq!(s.opt::<u64>("budget", None).unwrap(), None);
        assert_eq!(s.render(), "");
    }

    #[test]
    fn sidecar_keeps_the_extension() {
        assert_eq!(sidecar_path(Path::new("a/b.csv"), "config"), PathBuf::from("a/b.csv.config"));
        assert_eq!(sidecar_path(Path::new("faces/"), "config"), PathBuf::from("faces.config"));
    }
}
