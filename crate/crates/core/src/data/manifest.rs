//! Dataset manifests.
//!
//! A manifest is a CSV with header
//! `id,relative_path,label[,split][,bbox_x,bbox_y,bbox_w,bbox_h]` rooted at
//! a directory of images. Labels are class indices (or class names when a
//! name list is supplied); bounding boxes are relative coordinates in
//! [0, 1] produced by any external face detector, with whole-image fallback
//! when absent.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split value {other:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LabeledSample {
    pub id: String,
    pub relative_path: String,
    pub label: usize,
    /// Relative (x, y, w, h) in [0, 1].
    pub bbox: Option<[f64; 4]>,
    pub split: Option<Split>,
}

#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub samples: Vec<LabeledSample>,
    pub class_names: Vec<String>,
}

impl DatasetManifest {
    pub fn resolve_path(&self, sample: &LabeledSample) -> PathBuf {
        self.root.join(&sample.relative_path)
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == Some(split))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn has_unassigned_split(&self) -> bool {
        self.samples.iter().any(|s| s.split.is_none())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.class_names.len()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }
}

/// Default display names when the configuration gives none.
pub fn default_class_names(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("class_{i}")).collect()
}

/// Load and validate a manifest. Rows whose image file is missing are
/// dropped and reported in the returned warning list; structural problems
/// (malformed rows, unknown labels, duplicate ids) are hard errors naming
/// the offending line.
pub fn load_manifest(
    root: &Path,
    labels_file: &Path,
    class_names: &[String],
) -> Result<(DatasetManifest, Vec<String>)> {
    let path_str = labels_file.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .flexible(false)
        .from_path(labels_file)
        .map_err(|e| Error::Manifest {
            path: path_str.clone(),
            line: 0,
            msg: e.to_string(),
        })?;

    let headers = reader
        .headers()
        .map_err(|e| Error::Manifest {
            path: path_str.clone(),
            line: 1,
            msg: e.to_string(),
        })?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let id_col = col("id").ok_or_else(|| missing_column(&path_str, "id"))?;
    let path_col = col("relative_path").ok_or_else(|| missing_column(&path_str, "relative_path"))?;
    let label_col = col("label").ok_or_else(|| missing_column(&path_str, "label"))?;
    let split_col = col("split");
    let bbox_cols = match (col("bbox_x"), col("bbox_y"), col("bbox_w"), col("bbox_h")) {
        (Some(x), Some(y), Some(w), Some(h)) => Some([x, y, w, h]),
        (None, None, None, None) => None,
        _ => {
            return Err(Error::Manifest {
                path: path_str,
                line: 1,
                msg: "bbox columns must appear as all of bbox_x,bbox_y,bbox_w,bbox_h or none".into(),
            })
        }
    };

    let mut samples = Vec::new();
    let mut warnings = Vec::new();
    let mut seen_ids: HashSet<String> = HashSet::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e
                .position()
                .map(|p| p.line() as usize)
                .unwrap_or(0);
            Error::Manifest {
                path: path_str.clone(),
                line,
                msg: e.to_string(),
            }
        })?;
        let line = record
            .position()
            .map(|p| p.line() as usize)
            .unwrap_or(0);
        let err = |msg: String| Error::Manifest {
            path: path_str.clone(),
            line,
            msg,
        };

        let id = record.get(id_col).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(err("empty id".into()));
        }
        if !seen_ids.insert(id.clone()) {
            return Err(err(format!("duplicate id {id}")));
        }
        let relative_path = record.get(path_col).unwrap_or("").to_string();
        if relative_path.is_empty() {
            return Err(err(format!("row {id}: empty relative_path")));
        }
        let raw_label = record.get(label_col).unwrap_or("");
        let label = parse_label(raw_label, class_names)
            .ok_or_else(|| err(format!("row {id}: unknown label {raw_label:?}")))?;

        let split = match split_col.and_then(|c| record.get(c)).filter(|s| !s.is_empty()) {
            Some(s) => Some(Split::parse(s).map_err(|e| err(format!("row {id}: {e}")))?),
            None => None,
        };

        let bbox = match bbox_cols {
            Some(cols) => parse_bbox(&record, cols).map_err(|msg| err(format!("row {id}: {msg}")))?,
            None => None,
        };

        let full = root.join(&relative_path);
        if !full.is_file() {
            warnings.push(format!("{id}: missing file {}", full.display()));
            continue;
        }
        samples.push(LabeledSample {
            id,
            relative_path,
            label,
            bbox,
            split,
        });
    }

    Ok((
        DatasetManifest {
            root: root.to_path_buf(),
            samples,
            class_names: class_names.to_vec(),
        },
        warnings,
    ))
}

fn missing_column(path: &str, name: &str) -> Error {
    Error::Manifest {
        path: path.to_string(),
        line: 1,
        msg: format!("missing required column {name}"),
    }
}

fn parse_label(raw: &str, class_names: &[String]) -> Option<usize> {
    if let Ok(idx) = raw.parse::<usize>() {
        return (idx < class_names.len()).then_some(idx);
    }
    class_names.iter().position(|n| n == raw)
}

fn parse_bbox(record: &csv::StringRecord, cols: [usize; 4]) -> std::result::Result<Option<[f64; 4]>, String> {
    let raw: Vec<&str> = cols
        .iter()
        .map(|&c| record.get(c).unwrap_or("").trim())
        .collect();
    if raw.iter().all(|s| s.is_empty()) {
        return Ok(None);
    }
    let mut vals = [0.0f64; 4];
    for (v, s) in vals.iter_mut().zip(&raw) {
        *v = s
            .parse::<f64>()
            .map_err(|_| format!("invalid bbox value {s:?}"))?;
    }
    let [_, _, w, h] = vals;
    if w <= 0.0 || h <= 0.0 {
        return Err(format!("bbox has non-positive extent {w}x{h}"));
    }
    Ok(Some(vals))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn write_fixture(dir: &Path, csv: &str, files: &[&str]) -> PathBuf {
        for f in files {
            let p = dir.join(f);
            fs::create_dir_all(p.parent().unwrap()).unwrap();
            fs::write(p, b"not-a-real-image").unwrap();
        }
        let labels = dir.join("labels.csv");
        fs::write(&labels, csv).unwrap();
        labels
    }

    fn classes(k: usize) -> Vec<String> {
        default_class_names(k)
    }

    #[test]
    fn three_row_csv_loads() {
        let dir = tempfile::tempdir().unwrap();
        let labels = write_fixture(
            dir.path(),
            "id,relative_path,label\na,img/a.png,0\nb,img/b.png,1\nc,img/c.png,0\n",
            &["img/a.png", "img/b.png", "img/c.png"],
        );
        let (manifest, warnings) = load_manifest(dir.path(), &labels, &classes(2)).unwrap();
        assert_eq!(manifest.samples.len(), 3);
        assert!(warnings.is_empty());
        assert_eq!(manifest.samples[1].label, 1);
    }

    #[test]
    fn unknown_label_names_the_row() {
        let dir = tempfile::tempdir().unwrap();
        let labels = write_fixture(
            dir.path(),
            "id,relative_path,label\na,img/a.png,0\nb,img/b.png,9\n",
            &["img/a.png", "img/b.png"],
        );
        let err = load_manifest(dir.path(), &labels, &classes(2)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 3") && msg.contains('b'), "{msg}");
    }

    #[test]
    fn label_names_resolve_against_class_list() {
        let dir = tempfile::tempdir().unwrap();
        let labels = write_fixture(
            dir.path(),
            "id,relative_path,label\na,img/a.png,happy\n",
            &["img/a.png"],
        );
        let names = vec!["angry".to_string(), "happy".to_string()];
        let (manifest, _) = load_manifest(dir.path(), &labels, &names).unwrap();
        assert_eq!(manifest.samples[0].label, 1);
    }

    #[test]
    fn duplicate_id_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let labels = write_fixture(
            dir.path(),
            "id,relative_path,label\na,img/a.png,0\na,img/b.png,1\n",
            &["img/a.png", "img/b.png"],
        );
        assert!(load_manifest(dir.path(), &labels, &classes(2)).is_err());
    }

    #[test]
    fn missing_files_become_named_warnings() {
        let dir = tempfile::tempdir().unwrap();
        let mut csv = String::from("id,relative_path,label\n");
        let mut files = Vec::new();
        let names: Vec<String> = (0..100).map(|i| format!("img/{i}.png")).collect();
        for i in 0..100 {
            csv.push_str(&format!("s{i},{},{}\n", names[i], i % 2));
            if i % 10 != 0 {
                files.push(names[i].as_str());
            }
        }
        let labels = write_fixture(dir.path(), &csv, &files);
        let (manifest, warnings) = load_manifest(dir.path(), &labels, &classes(2)).unwrap();
        assert_eq!(manifest.samples.len(), 90);
        assert_eq!(warnings.len(), 10);
        assert!(warnings[0].contains("s0"), "{}", warnings[0]);
    }

    #[test]
    fn bbox_and_split_columns_parse() {
        let dir = tempfile::tempdir().unwrap();
        let labels = write_fixture(
            dir.path(),
            "id,relative_path,label,split,bbox_x,bbox_y,bbox_w,bbox_h\n\
             a,img/a.png,0,train,0.1,0.2,0.5,0.5\n\
             b,img/b.png,1,test,,,,\n",
            &["img/a.png", "img/b.png"],
        );
        let (manifest, _) = load_manifest(dir.path(), &labels, &classes(2)).unwrap();
        assert_eq!(manifest.samples[0].bbox, Some([0.1, 0.2, 0.5, 0.5]));
        assert_eq!(manifest.samples[0].split, Some(Split::Train));
        assert_eq!(manifest.samples[1].bbox, None);
        assert_eq!(manifest.samples[1].split, Some(Split::Test));
    }

    #[test]
    fn non_positive_bbox_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let labels = write_fixture(
            dir.path(),
            "id,relative_path,label,bbox_x,bbox_y,bbox_w,bbox_h\na,img/a.png,0,0.5,0.5,0.0,0.4\n",
            &["img/a.png"],
        );
        assert!(load_manifest(dir.path(), &labels, &classes(2)).is_err());
    }
}
