//! Tiny flag parser: `--name value` pairs, `--name` booleans, strict about
//! unknown flags so typos surface as usage errors.

use std::collections::BTreeMap;

use crate::CmdError;

pub struct Args {
    values: BTreeMap<String, String>,
    switches: Vec<String>,
    help: bool,
}

impl Args {
    /// `switch_names` are flags that take no value.
    pub fn parse(raw: &[String], switch_names: &[&str]) -> Result<Self, CmdError> {
        let mut values = BTreeMap::new();
        let mut switches = Vec::new();
        let mut help = false;
        let mut i = 0;
        while i < raw.len() {
            let flag = &raw[i];
            let Some(name) = flag.strip_prefix("--") else {
                return Err(CmdError::Usage(format!("unexpected argument `{flag}`")));
            };
            if name == "help" {
                help = true;
                i += 1;
                continue;
            }
            if switch_names.contains(&name) {
                switches.push(name.to_string());
                i += 1;
                continue;
            }
            let Some(value) = raw.get(i + 1) else {
                return Err(CmdError::Usage(format!("flag --{name} needs a value")));
            };
            if values.insert(name.to_string(), value.clone()).is_some() {
                return Err(CmdError::Usage(format!("flag --{name} given twice")));
            }
            i += 2;
        }
        Ok(Self {
            values,
            switches,
            help,
        })
    }

    pub fn help_requested(&self) -> bool {
        self.help
    }

    pub fn switch(&self, name: &str) -> bool {
        self.switches.iter().any(|s| s == name)
    }


    pub fn take(&mut self, name: &str) -> Option<String> {
        self.values.remove(name)
    }

    pub fn required(&mut self, name: &str) -> Result<String, CmdError> {
        self.take(name)
            .ok_or_else(|| CmdError::Usage(format!("missing required flag --{name}")))
    }

    pub fn parse_or<T: std::str::FromStr>(&mut self, name: &str, default: T) -> Result<T, CmdError> {
        match self.take(name) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| CmdError::Usage(format!("bad value for --{name}: {v}"))),
        }
    }

    /// Call after consuming everything the command understands.
    pub fn reject_unknown(&self) -> Result<(), CmdError> {
        if let Some(name) = self.values.keys().next() {
            return Err(CmdError::Usage(format!("unknown flag --{name}")));
        }
        Ok(())
    }

    /// Remove and return every remaining flag, in sorted order.
    pub fn drain(&mut self) -> Vec<(String, String)> {
        std::mem::take(&mut self.values).into_iter().collect()
    }
}

/// FNV-1a over file bytes; a stable content fingerprint for determinism
/// checks without external hashing dependencies.
pub fn content_hash(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
