use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::format::read_tensor_file;

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const MANIFEST_HEADER: &str = "sequence_path,label,eye_id";

/// One labelled sequence of `T` single-channel `S x S` slices.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSample {
    /// Row-major `T*S*S` pixels in `[0, 1]`.
    pub pixels: Vec<f32>,
    pub seq_len: usize,
    pub size: usize,
    pub label: usize,
    pub eye_id: u32,
    pub sequence_id: usize,
}

impl SequenceSample {
    pub fn slice(&self, t: usize) -> &[f32] {
        let a = self.size * self.size;
        &self.pixels[t * a..(t + 1) * a]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Row index in the full manifest.
    pub sequence_id: usize,
    /// Relative to the dataset root.
    pub path: String,
    pub label: usize,
    pub eye_id: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for e in &self.entries {
            out.push_str(&format!("{},{},{}\n", e.path, e.label, e.eye_id));
        }
        out
    }

    pub fn parse(root: &Path, text: &str) -> Result<Self> {
        let mut lines = text.split('\n');
        match lines.next() {
            Some(h) if h.trim_end_matches('\r') == MANIFEST_HEADER => {}
            other => {
                return Err(Error::Format(format!(
                    "manifest header must be `{MANIFEST_HEADER}`, got {other:?}"
                )))
            }
        }
        let mut entries = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            let [path, label, eye] = fields[..] else {
                return Err(Error::Format(format!("manifest line {}: expected 3 fields", lineno + 2)));
            };
            let bad = |what: &str| Error::Format(format!("manifest line {}: bad {what}", lineno + 2));
            entries.push(ManifestEntry {
                sequence_id: entries.len(),
                path: path.to_string(),
                label: label.parse().map_err(|_| bad("label"))?,
                eye_id: eye.parse().map_err(|_| bad("eye_id"))?,
            });
        }
        Ok(Self {
            root: root.to_path_buf(),
            entries,
        })
    }

    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::parse(root, &text)
    }

    pub fn write(&self) -> Result<()> {
        let path = self.root.join(MANIFEST_FILE);
        fs::write(&path, self.to_csv()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn eye_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.entries.iter().map(|e| e.eye_id).collect::<HashSet<_>>().into_iter().collect();
        ids.sort_unstable();
        ids
    }

    pub fn class_counts(&self, k: usize) -> Vec<usize> {
        let mut counts = vec![0; k];
        for e in &self.entries {
            if e.label < k {
                counts[e.label] += 1;
            }
        }
        counts
    }

    pub fn subset(&self, keep: impl Fn(&ManifestEntry) -> bool) -> Self {
        Self {
            root: self.root.clone(),
            entries: self.entries.iter().filter(|e| keep(e)).cloned().collect(),
        }
    }
}

/// Reads every sequence of `manifest`. Labels above `num_classes - 1` are
/// folded into the last class (binary mode maps narrow and synechiae to
/// "closed").
pub fn load_samples(manifest: &DatasetManifest, num_classes: usize) -> Result<Vec<SequenceSample>> {
    let mut samples: Vec<SequenceSample> = Vec::with_capacity(manifest.entries.len());
    let mut seen = HashSet::new();
    for e in &manifest.entries {
        if !seen.insert(e.sequence_id) {
            return Err(Error::Format(format!("duplicate sequence id {}", e.sequence_id)));
        }
        if e.label > 2 {
            return Err(Error::Range(format!("label {} in {}", e.label, e.path)));
        }
        let t = read_tensor_file(&manifest.root.join(&e.path))?;
        let &[seq_len, h, w] = t.dims() else {
            return Err(Error::Format(format!("{}: sequence must be [T,S,S], got {:?}", e.path, t.dims())));
        };
        if h != w {
            return Err(Error::Format(format!("{}: slices must be square, got {h}x{w}", e.path)));
        }
        if let Some(first) = samples.first() {
            if (first.seq_len, first.size) != (seq_len, h) {
                return Err(Error::Format(format!(
                    "{}: shape [{seq_len},{h},{h}] differs from [{},{},{}]",
                    e.path, first.seq_len, first.size, first.size
                )));
            }
        }
        if t.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Format(format!("{}: pixel values outside [0,1]", e.path)));
        }
        samples.push(SequenceSample {
            pixels: t.into_data(),
            seq_len,
            size: h,
            label: e.label.min(num_classes - 1),
            eye_id: e.eye_id,
            sequence_id: e.sequence_id,
        });
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_roundtrip() {
        let m = DatasetManifest {
            root: PathBuf::from("/data"),
            entries: vec![
                ManifestEntry {
                    sequence_id: 0,
                    path: "sequences/seq_000000.smat".into(),
                    label: 2,
                    eye_id: 7,
                },
                ManifestEntry {
                    sequence_id: 1,
                    path: "sequences/seq_000001.smat".into(),
                    label: 0,
                    eye_id: 7,
                },
            ],
        };
        let csv = m.to_csv();
        assert!(csv.starts_with("sequence_path,label,eye_id\n"));
        assert!(!csv.contains('\r'));
        assert_eq!(DatasetManifest::parse(Path::new("/data"), &csv).unwrap(), m);
    }

    #[test]
    fn bad_manifest_rejected() {
        let root = Path::new(".");
        assert!(DatasetManifest::parse(root, "path,label\n").is_err());
        assert!(DatasetManifest::parse(root, "sequence_path,label,eye_id\na,b,1\n").is_err());
        assert!(DatasetManifest::parse(root, "sequence_path,label,eye_id\na,1\n").is_err());
    }
}
