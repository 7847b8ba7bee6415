//! Dataset manifests: one scene per line,
//!
//! ```text
//! scene_id<TAB>gt_path<TAB>setting=path[,setting=path...]
//! ```
//!
//! Relative paths resolve against the manifest's directory. Lines starting
//! with `#` and blank lines are ignored.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::PipelineError;

/// Camera white-balance preset a rendering was produced with.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum WbSetting {
    Tungsten2850,
    Fluorescent3800,
    Daylight5500,
    Cloudy6500,
    Shade7500,
    Other(String),
}

impl WbSetting {
    pub const PRESETS: [WbSetting; 5] = [
        WbSetting::Tungsten2850,
        WbSetting::Fluorescent3800,
        WbSetting::Daylight5500,
        WbSetting::Cloudy6500,
        WbSetting::Shade7500,
    ];
}

impl fmt::Display for WbSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WbSetting::Tungsten2850 => f.write_str("T"),
            WbSetting::Fluorescent3800 => f.write_str("F"),
            WbSetting::Daylight5500 => f.write_str("D"),
            WbSetting::Cloudy6500 => f.write_str("C"),
            WbSetting::Shade7500 => f.write_str("S"),
            WbSetting::Other(s) => f.write_str(s),
        }
    }
}

impl FromStr for WbSetting {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "t" | "tungsten" | "tungsten2850" => WbSetting::Tungsten2850,
            "f" | "fluorescent" | "fluorescent3800" => WbSetting::Fluorescent3800,
            "d" | "daylight" | "daylight5500" => WbSetting::Daylight5500,
            "c" | "cloudy" | "cloudy6500" => WbSetting::Cloudy6500,
            "s" | "shade" | "shade7500" => WbSetting::Shade7500,
            _ => WbSetting::Other(s.to_string()),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub scene_id: String,
    pub gt_path: PathBuf,
    pub renderings: BTreeMap<WbSetting, PathBuf>,
}

impl SceneRecord {
    pub fn to_line(&self) -> String {
        let r: Vec<String> = self
            .renderings
            .iter()
            .map(|(s, p)| format!("{s}={}", p.display()))
            .collect();
        format!("{}\t{}\t{}", self.scene_id, self.gt_path.display(), r.join(","))
    }
}

pub fn parse_manifest(text: &str, base: &Path, origin: &str) -> Result<Vec<SceneRecord>, PipelineError> {
    let parse_err = |line: usize, reason: String| PipelineError::Manifest {
        path: origin.to_string(),
        line,
        reason,
    };
    let resolve = |p: &str| {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    };
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let lineno = n + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse_err(lineno, format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        let scene_id = fields[0].trim().to_string();
        if scene_id.is_empty() {
            return Err(parse_err(lineno, "empty scene id".into()));
        }
        if !seen.insert(scene_id.clone()) {
            return Err(PipelineError::DuplicateScene(scene_id));
        }
        let mut renderings = BTreeMap::new();
        for item in fields[2].split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (setting, path) = item
                .split_once('=')
                .ok_or_else(|| parse_err(lineno, format!("rendering {item:?} is not setting=path")))?;
            let setting: WbSetting = setting.trim().parse().unwrap();
            if renderings.insert(setting.clone(), resolve(path.trim())).is_some() {
                return Err(parse_err(lineno, format!("setting {setting} listed twice")));
            }
        }
        if renderings.is_empty() {
            return Err(parse_err(lineno, "scene has no renderings".into()));
        }
        let record = SceneRecord {
            gt_path: resolve(fields[1].trim()),
            scene_id,
            renderings,
        };
        for p in std::iter::once(&record.gt_path).chain(record.renderings.values()) {
            if !p.is_file() {
                return Err(PipelineError::MissingFile {
                    scene: record.scene_id.clone(),
                    path: p.clone(),
                });
            }
        }
        records.push(record);
    }
    Ok(records)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<SceneRecord>, PipelineError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_manifest(&text, base, &path.display().to_string())
}

pub fn write_manifest(records: &[SceneRecord], path: impl AsRef<Path>) -> Result<(), PipelineError> {
    let path = path.as_ref();
    let mut text = String::from("# scene_id\tgt_path\tsetting=path,...\n");
    for r in records {
        text.push_str(&r.to_line());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })
}
