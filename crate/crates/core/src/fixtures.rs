//! Checks over the shipped fixture corpus, driven by `fixtures/MANIFEST.json`.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backend::{PricingTable, Script};
use crate::env::EnvFixture;
use crate::eval::Suite;
use crate::flowdef::{load_flow, parse_flow, serialize_flow, validate_flow, Rewire};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FixtureKind {
    Flow,
    Env,
    Suite,
    Script,
    Prompt,
    Pricing,
    /// A rewire list for `ablate`.
    Rewire,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Relative to the repository root.
    pub path: String,
    pub kind: FixtureKind,
    /// Where the content comes from: a transcription source or `original`.
    pub provenance: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureManifest {
    pub fixtures: Vec<ManifestEntry>,
}

impl FixtureManifest {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixtureProblem {
    pub path: String,
    pub detail: String,
}

impl fmt::Display for FixtureProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.detail)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FixtureReport {
    pub checked: usize,
    pub problems: Vec<FixtureProblem>,
}

impl FixtureReport {
    pub fn is_clean(&self) -> bool {
        self.problems.is_empty()
    }
}

/// Directories whose files must all be listed in the manifest.
pub const FIXTURE_DIRS: [&str; 6] = ["flows", "prompts", "envs", "scripts", "suites", "fixtures/rewire"];

fn check_entry(root: &Path, entry: &ManifestEntry) -> Result<(), String> {
    let path = root.join(&entry.path);
    if !path.is_file() {
        return Err("file does not exist".into());
    }
    match entry.kind {
        FixtureKind::Flow => {
            let text = std::fs::read_to_string(&path).map_err(|e| e.to_string())?;
            let parsed = parse_flow(&text).map_err(|e| e.to_string())?;
            if serialize_flow(&parsed) != text {
                return Err("not in canonical form (serialize(parse(file)) differs)".into());
            }
            let flow = load_flow(&path).map_err(|e| e.to_string())?;
            let report = validate_flow(&flow);
            if !report.errors.is_empty() {
                return Err(format!("validation errors: {report}"));
            }
        }
        FixtureKind::Env => {
            EnvFixture::load(&path).map_err(|e| e.to_string())?;
        }
        FixtureKind::Suite => {
            Suite::load(&path).map_err(|e| e.to_string())?;
        }
        FixtureKind::Script => {
            Script::load(&path).map_err(|e| e.to_string())?;
        }
        FixtureKind::Pricing => {
            PricingTable::load(&path).map_err(|e| e.to_string())?;
        }
        FixtureKind::Rewire => {
            let text = std::fs::read_to_string(&path).map_err(|e| e.to_string())?;
            serde_json::from_str::<Vec<Rewire>>(&text).map_err(|e| e.to_string())?;
        }
        FixtureKind::Prompt => {
            let text = std::fs::read_to_string(&path).map_err(|e| e.to_string())?;
            if text.trim().is_empty() {
                return Err("prompt is empty".into());
            }
        }
    }
    Ok(())
}

fn files_under(dir: &Path, out: &mut Vec<PathBuf>) {
    let Ok(read) = std::fs::read_dir(dir) else { return };
    for entry in read.flatten() {
        let path = entry.path();
        if path.is_dir() {
            files_under(&path, out);
        } else {
            out.push(path);
        }
    }
}

/// Checks every manifest entry and reports fixture files the manifest
/// does not list.
pub fn check_fixtures(root: &Path, manifest: &FixtureManifest) -> FixtureReport {
    let mut report = FixtureReport::default();
    let mut listed = BTreeSet::new();
    for entry in &manifest.fixtures {
        report.checked += 1;
        if !listed.insert(entry.path.clone()) {
            report.problems.push(FixtureProblem {
                path: entry.path.clone(),
                detail: "listed twice".into(),
            });
        }
        if entry.provenance.trim().is_empty() {
            report.problems.push(FixtureProblem {
                path: entry.path.clone(),
                detail: "missing provenance".into(),
            });
        }
        if let Err(detail) = check_entry(root, entry) {
            report.problems.push(FixtureProblem {
                path: entry.path.clone(),
                detail,
            });
        }
    }
    let mut present = Vec::new();
    for dir in FIXTURE_DIRS {
        files_under(&root.join(dir), &mut present);
    }
    present.sort();
    for path in present {
        let rel = path
            .strip_prefix(root)
            .unwrap_or(&path)
            .to_string_lossy()
            .replace('\\', "/");
        if !listed.contains(&rel) {
            report.problems.push(FixtureProblem {
                path: rel,
                detail: "not listed in the manifest".into(),
            });
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dangling_prompt_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("flows")).unwrap();
        let flow = r#"{
  "name": "t",
  "initial": "A",
  "finals": [
    "End"
  ],
  "error_markers": [
    "Error",
    "error:"
  ],
  "states": [
    {
      "id": "A",
      "outputs": [
        {
          "name": "a",
          "kind": "agent",
          "agent": {
            "instruction": {
              "file": "missing.txt"
            },
            "assembly": "system",
            "backend": "default"
          }
        }
      ],
      "default": "End"
    },
    {
      "id": "End"
    }
  ]
}
"#;
        std::fs::write(dir.path().join("flows/t.json"), flow).unwrap();
        let manifest = FixtureManifest {
            fixtures: vec![ManifestEntry {
                path: "flows/t.json".into(),
                kind: FixtureKind::Flow,
                provenance: "original".into(),
            }],
        };
        let report = check_fixtures(dir.path(), &manifest);
        assert_eq!(report.problems.len(), 1, "{:?}", report.problems);
        assert!(report.problems[0].detail.contains("missing.txt"));
    }

    #[test]
    fn unlisted_and_unprovenanced_files_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("prompts/x")).unwrap();
        std::fs::write(dir.path().join("prompts/x/a.txt"), "hello").unwrap();
        std::fs::write(dir.path().join("prompts/x/b.txt"), "hello").unwrap();
        let manifest = FixtureManifest {
            fixtures: vec![ManifestEntry {
                path: "prompts/x/a.txt".into(),
                kind: FixtureKind::Prompt,
                provenance: " ".into(),
            }],
        };
        let report = check_fixtures(dir.path(), &manifest);
        let details: Vec<_> = report.problems.iter().map(|p| (p.path.as_str(), p.detail.as_str())).collect();
        assert_eq!(
            details,
            vec![
                ("prompts/x/a.txt", "missing provenance"),
                ("prompts/x/b.txt", "not listed in the manifest")
            ]
        );
    }
}
