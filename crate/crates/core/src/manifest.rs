//! Per-scan sidecar manifest (`<scan_id>.manifest`).
//!
//! Plain `key=value` lines; blank lines and lines starting with `#` are
//! ignored. Recognised keys:
//!
//! ```text
//! scan_id=case_001
//! num_classes=7
//! split=train
//! class.1.name=liver
//! class.1.status=labeled
//! ```
//!
//! `status` is one of `labeled`, `unlabeled`, `pseudo`. Unknown keys are kept
//! in [`ScanManifest::extra`] and written back in sorted order.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ClassStatus {
    Labeled,
    Unlabeled,
    Pseudo,
}

impl ClassStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            ClassStatus::Labeled => "labeled",
            ClassStatus::Unlabeled => "unlabeled",
            ClassStatus::Pseudo => "pseudo",
        }
    }
}

impl FromStr for ClassStatus {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "labeled" => Ok(ClassStatus::Labeled),
            "unlabeled" => Ok(ClassStatus::Unlabeled),
            "pseudo" => Ok(ClassStatus::Pseudo),
            other => Err(format!("unknown class status {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClassEntry {
    pub name: Option<String>,
    pub status: Option<ClassStatus>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScanManifest {
    pub scan_id: Option<String>,
    pub num_classes: Option<usize>,
    pub classes: BTreeMap<u8, ClassEntry>,
    pub extra: BTreeMap<String, String>,
}

impl ScanManifest {
    pub fn new(scan_id: impl Into<String>, num_classes: usize) -> Self {
        ScanManifest {
            scan_id: Some(scan_id.into()),
            num_classes: Some(num_classes),
            ..Default::default()
        }
    }

    pub fn set_status(&mut self, class: u8, status: ClassStatus) {
        self.classes.entry(class).or_default().status = Some(status);
    }

    pub fn set_name(&mut self, class: u8, name: impl Into<String>) {
        self.classes.entry(class).or_default().name = Some(name.into());
    }

    pub fn class_name(&self, class: u8) -> String {
        self.classes
            .get(&class)
            .and_then(|e| e.name.clone())
            .unwrap_or_else(|| format!("class_{class}"))
    }

    pub fn classes_with(&self, status: ClassStatus) -> BTreeSet<u8> {
        self.classes
            .iter()
            .filter(|(_, e)| e.status == Some(status))
            .map(|(&c, _)| c)
            .collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = ScanManifest::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Manifest { line: i + 1, msg };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if let Some(rest) = key.strip_prefix("class.") {
                let (id, field) = rest
                    .split_once('.')
                    .ok_or_else(|| err(format!("malformed class key {key:?}")))?;
                let id: u8 = id
                    .parse()
                    .map_err(|_| err(format!("class id {id:?} is not in 0..=255")))?;
                let entry = m.classes.entry(id).or_default();
                match field {
                    "name" => entry.name = Some(value.to_string()),
                    "status" => entry.status = Some(value.parse().map_err(err)?),
                    other => return Err(err(format!("unknown class field {other:?}"))),
                }
            } else {
                match key {
                    "scan_id" => m.scan_id = Some(value.to_string()),
                    "num_classes" => {
                        m.num_classes = Some(
                            value
                                .parse()
                                .map_err(|_| err(format!("bad num_classes {value:?}")))?,
                        )
                    }
                    _ => {
                        m.extra.insert(key.to_string(), value.to_string());
                    }
                }
            }
        }
        Ok(m)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        if let Some(id) = &self.scan_id {
            let _ = writeln!(out, "scan_id={id}");
        }
        if let Some(c) = self.num_classes {
            let _ = writeln!(out, "num_classes={c}");
        }
        for (k, v) in &self.extra {
            let _ = writeln!(out, "{k}={v}");
        }
        for (id, e) in &self.classes {
            if let Some(name) = &e.name {
                let _ = writeln!(out, "class.{id}.name={name}");
            }
            if let Some(s) = e.status {
                let _ = writeln!(out, "class.{id}.status={}", s.as_str());
            }
        }
        out
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ScanManifest::parse(&text)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }
}
