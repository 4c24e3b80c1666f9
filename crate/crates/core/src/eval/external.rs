//! Adapters for the external ssdeep and sdhash executables.
//!
//! Tools are located only through explicit paths. A missing executable
//! yields `None` so evaluations run without that column.

use std::fmt;
use std::io::{ErrorKind, Write as _};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use tempfile::NamedTempFile;

use super::{Hasher, PairScore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExternalKind {
    Ssdeep,
    Sdhash,
}

impl ExternalKind {
    pub fn name(self) -> &'static str {
        match self {
            ExternalKind::Ssdeep => "ssdeep",
            ExternalKind::Sdhash => "sdhash",
        }
    }

    /// Score at or above which the tool's authors consider two files similar.
    pub fn default_threshold(self) -> u32 {
        match self {
            ExternalKind::Ssdeep => 50,
            ExternalKind::Sdhash => 21,
        }
    }

    fn args<'a>(self, a: &'a Path, b: &'a Path) -> Vec<&'a std::ffi::OsStr> {
        let flags: &[&'static str] = match self {
            // Silent, show all matches including zero, compare the inputs.
            ExternalKind::Ssdeep => &["-s", "-a", "-d"],
            // Hash and compare all pairs, report every score.
            ExternalKind::Sdhash => &["-g", "-t", "0"],
        };
        flags.iter().map(|f| std::ffi::OsStr::new(*f)).chain([a.as_os_str(), b.as_os_str()]).collect()
    }

    pub fn parse_output(self, out: &str) -> Result<u32> {
        let parsed = match self {
            ExternalKind::Ssdeep => parse_ssdeep(out),
            ExternalKind::Sdhash => parse_sdhash(out),
        };
        parsed.ok_or_else(|| Error::Adapter { msg: format!("cannot parse {} output", self.name()), output: out.to_string() })
    }
}

impl fmt::Display for ExternalKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExternalKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ssdeep" => Ok(ExternalKind::Ssdeep),
            "sdhash" => Ok(ExternalKind::Sdhash),
            _ => Err(Error::Config(format!("unknown external hasher {s:?}"))),
        }
    }
}

fn checked(score: i64) -> Option<u32> {
    (0..=100).contains(&score).then_some(score as u32)
}

/// `<b> matches <a> (<score>)`; the last such line wins.
fn parse_ssdeep(out: &str) -> Option<u32> {
    out.lines().rev().find(|l| l.contains(" matches ")).and_then(|l| {
        let open = l.rfind('(')?;
        let close = l.rfind(')')?;
        checked(l.get(open + 1..close)?.trim().parse().ok()?)
    })
}

/// `<a>|<b>|<score>`; negative scores (inputs too small to compare) map to 0.
fn parse_sdhash(out: &str) -> Option<u32> {
    out.lines().rev().find(|l| l.matches('|').count() >= 2).and_then(|l| {
        let score: i64 = l.rsplit('|').next()?.trim().parse().ok()?;
        checked(score.max(0))
    })
}

/// Runs the tool on two files and returns its 0..=100 score, or `None` when
/// `exe` does not exist.
pub fn run_external_hasher(kind: ExternalKind, a: &Path, b: &Path, exe: &Path) -> Result<Option<u32>> {
    let output = match Command::new(exe).args(kind.args(a, b)).output() {
        Ok(o) => o,
        Err(e) if matches!(e.kind(), ErrorKind::NotFound | ErrorKind::PermissionDenied) => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    let stdout = String::from_utf8_lossy(&output.stdout);
    if !output.status.success() {
        return Err(Error::Adapter {
            msg: format!("{} exited with {}", kind, output.status),
            output: format!("{stdout}{}", String::from_utf8_lossy(&output.stderr)),
        });
    }
    kind.parse_output(&stdout).map(Some)
}

/// Distance on the same footing as the learned digest: `100 - score`.
pub fn score_to_distance(score: u32) -> f64 {
    f64::from(100 - score.min(100))
}

/// Scores pairs through an external tool. Each digest is a temporary copy of
/// the file handed to the tool.
pub struct ExternalHasher {
    pub kind: ExternalKind,
    pub exe: PathBuf,
    /// Similar when the tool's score is at least this value.
    pub threshold: u32,
}

impl ExternalHasher {
    /// `None` when `exe` is not an existing file.
    pub fn locate(kind: ExternalKind, exe: &Path) -> Option<Self> {
        exe.is_file().then(|| ExternalHasher { kind, exe: exe.to_path_buf(), threshold: kind.default_threshold() })
    }
}

impl Hasher for ExternalHasher {
    type Digest = NamedTempFile;

    fn name(&self) -> &str {
        self.kind.name()
    }

    fn digest(&self, bytes: &[u8]) -> Result<NamedTempFile> {
        let mut f = NamedTempFile::new()?;
        f.write_all(bytes)?;
        f.flush()?;
        Ok(f)
    }

    fn compare(&self, a: &NamedTempFile, b: &NamedTempFile) -> Result<PairScore> {
        let score = run_external_hasher(self.kind, a.path(), b.path(), &self.exe)?.ok_or_else(|| Error::Adapter {
            msg: format!("{} disappeared during evaluation", self.exe.display()),
            output: String::new(),
        })?;
        Ok(PairScore { distance: score_to_distance(score), uneva_dist: 0, similar: score >= self.threshold })
    }
}
