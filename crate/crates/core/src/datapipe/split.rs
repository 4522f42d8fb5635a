//! Line-oriented split manifests: `split <name> <count>` followed by one id per line.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SplitManifest {
    /// Splits in file order.
    pub splits: Vec<(String, Vec<String>)>,
}

impl SplitManifest {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            msg: format!("line {line}: {msg}"),
        };
        let mut splits: Vec<(String, Vec<String>)> = Vec::new();
        let mut declared: Vec<usize> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut words = line.split_whitespace();
            if line.starts_with("split ") {
                words.next();
                let (Some(name), Some(count), None) = (words.next(), words.next(), words.next())
                else {
                    return Err(err(
                        i + 1,
                        format!("malformed header {line:?}, expected \"split <name> <count>\""),
                    ));
                };
                let count: usize = count.parse().map_err(|_| {
                    err(
                        i + 1,
                        format!("count {count:?} is not a non-negative integer"),
                    )
                })?;
                if splits.iter().any(|(n, _)| n == name) {
                    return Err(err(i + 1, format!("split {name:?} declared twice")));
                }
                splits.push((name.to_string(), Vec::new()));
                declared.push(count);
            } else {
                let Some((_, ids)) = splits.last_mut() else {
                    return Err(err(i + 1, format!("id {line:?} before any split header")));
                };
                if words.count() != 1 {
                    return Err(err(i + 1, format!("id {line:?} contains whitespace")));
                }
                ids.push(line.to_string());
            }
        }
        let manifest = SplitManifest { splits };
        for ((name, ids), &count) in manifest.splits.iter().zip(&declared) {
            if ids.len() != count {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    msg: format!(
                        "split {name:?} declares {count} ids but lists {}",
                        ids.len()
                    ),
                });
            }
        }
        manifest.check_disjoint().map_err(|msg| Error::Parse {
            path: path.to_path_buf(),
            msg,
        })?;
        Ok(manifest)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    fn check_disjoint(&self) -> std::result::Result<(), String> {
        let mut owner: BTreeMap<&str, &str> = BTreeMap::new();
        for (name, ids) in &self.splits {
            let mut seen = HashSet::new();
            for id in ids {
                if !seen.insert(id.as_str()) {
                    return Err(format!("id {id:?} listed twice in split {name:?}"));
                }
                if let Some(prev) = owner.insert(id, name) {
                    return Err(format!("id {id:?} appears in both {prev:?} and {name:?}"));
                }
            }
        }
        Ok(())
    }

    pub fn ids(&self, split: &str) -> Result<&[String]> {
        self.splits
            .iter()
            .find(|(n, _)| n == split)
            .map(|(_, ids)| ids.as_slice())
            .ok_or_else(|| Error::Data(format!("manifest has no split named {split:?}")))
    }

    /// `<dir>/<id>.mst` for every id of a split.
    pub fn paths(&self, split: &str, dir: &Path) -> Result<Vec<PathBuf>> {
        Ok(self
            .ids(split)?
            .iter()
            .map(|id| dir.join(format!("{id}.mst")))
            .collect())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, ids) in &self.splits {
            out.push_str(&format!("split {name} {}\n", ids.len()));
            for id in ids {
                out.push_str(id);
                out.push('\n');
            }
        }
        out
    }
}
