use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{LABEL_FAKE, LABEL_REAL};

pub const REAL_CLASS: &str = "real";
pub const MANIFEST_FILE: &str = "manifest.tsv";
const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub const ALL: [Split; 2] = [Split::Train, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::validation("split", format!("expected train or test, got `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    /// `<class>/<stem>`; unique within a manifest.
    pub sample_id: String,
    /// Identity shared by a pristine image and every fake derived from it.
    pub source_id: String,
    pub y: usize,
    /// Index into the method vocabulary; 0 is real.
    pub y_prime: usize,
    pub split: Split,
}

impl SampleRecord {
    pub fn is_fake(&self) -> bool {
        self.y == LABEL_FAKE
    }

    pub fn class_dir(&self) -> &str {
        self.sample_id.split_once('/').map_or("", |(c, _)| c)
    }

    pub fn stem(&self) -> &str {
        self.sample_id.split_once('/').map_or(&self.sample_id, |(_, s)| s)
    }
}

/// Sample list plus method vocabulary (`real` first).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub samples: Vec<SampleRecord>,
    pub method_vocabulary: Vec<String>,
}

impl CorpusManifest {
    /// Check the label, vocabulary and uniqueness contracts.
    pub fn new(samples: Vec<SampleRecord>, method_vocabulary: Vec<String>) -> Result<Self> {
        if method_vocabulary.first().map(String::as_str) != Some(REAL_CLASS) {
            return Err(Error::validation("method_vocabulary", "class 0 must be `real`"));
        }
        let mut seen = HashSet::new();
        for s in &samples {
            if !seen.insert(s.sample_id.as_str()) {
                return Err(Error::DuplicateSample(s.sample_id.clone()));
            }
            let ok = match s.y {
                LABEL_REAL => s.y_prime == 0,
                LABEL_FAKE => s.y_prime >= 1 && s.y_prime < method_vocabulary.len(),
                _ => false,
            };
            if !ok {
                return Err(Error::validation(
                    "labels",
                    format!("sample `{}` has y={} and y_prime={}", s.sample_id, s.y, s.y_prime),
                ));
            }
        }
        Ok(CorpusManifest {
            samples,
            method_vocabulary,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.method_vocabulary.len()
    }

    pub fn method_index(&self, name: &str) -> Option<usize> {
        self.method_vocabulary.iter().position(|m| m == name)
    }

    /// Indices of the samples in `split`.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.samples[i].split == split).collect()
    }

    /// Indices in `split` that are real, or fake with one of `methods`.
    pub fn indices_for_methods(&self, split: Split, methods: &[&str]) -> Result<Vec<usize>> {
        let wanted = methods
            .iter()
            .map(|m| {
                self.method_index(m)
                    .filter(|&i| i > 0)
                    .ok_or_else(|| Error::validation("methods", format!("unknown method `{m}`")))
            })
            .collect::<Result<BTreeSet<_>>>()?;
        Ok(self
            .split_indices(split)
            .into_iter()
            .filter(|&i| !self.samples[i].is_fake() || wanted.contains(&self.samples[i].y_prime))
            .collect())
    }

    /// Line-oriented text form: a vocabulary line, a header line, one sample per line.
    pub fn to_tsv(&self) -> String {
        let mut out = format!("#vocabulary\t{}\n", self.method_vocabulary.join("\t"));
        out.push_str("sample_id\tsource_id\ty\ty_prime\tsplit\n");
        for s in &self.samples {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                s.sample_id, s.source_id, s.y, s.y_prime, s.split
            ));
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let ctx = "manifest";
        let mut lines = text.lines();
        let vocab_line = lines.next().ok_or_else(|| Error::parse(ctx, "empty manifest"))?;
        let vocab: Vec<String> = vocab_line
            .strip_prefix("#vocabulary\t")
            .ok_or_else(|| Error::parse(ctx, "first line must start with `#vocabulary`"))?
            .split('\t')
            .map(str::to_owned)
            .collect();
        match lines.next() {
            Some("sample_id\tsource_id\ty\ty_prime\tsplit") => {}
            _ => return Err(Error::parse(ctx, "missing column header line")),
        }
        let mut samples = Vec::new();
        for (no, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(Error::parse(ctx, format!("line {}: expected 5 fields, got {}", no + 3, f.len())));
            }
            let num = |v: &str| v.parse::<usize>().map_err(|e| Error::parse(ctx, format!("line {}: {e}", no + 3)));
            samples.push(SampleRecord {
                sample_id: f[0].to_owned(),
                source_id: f[1].to_owned(),
                y: num(f[2])?,
                y_prime: num(f[3])?,
                split: f[4].parse()?,
            });
        }
        CorpusManifest::new(samples, vocab)
    }

    /// Copy with samples sorted by id, for order-insensitive comparison.
    pub fn sorted(&self) -> Self {
        let mut samples = self.samples.clone();
        samples.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        CorpusManifest {
            samples,
            method_vocabulary: self.method_vocabulary.clone(),
        }
    }
}

/// Source identity encoded in a file stem: everything before the first `_`.
pub fn source_of_stem(stem: &str) -> &str {
    stem.split_once('_').map_or(stem, |(s, _)| s)
}

/// Read `root/manifest.tsv` if present.
pub fn read_manifest(root: &Path) -> Result<Option<CorpusManifest>> {
    let path = root.join(MANIFEST_FILE);
    if !path.is_file() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    CorpusManifest::from_tsv(&text).map(Some)
}

pub fn write_manifest(manifest: &CorpusManifest, root: &Path) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let path = root.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_tsv()).map_err(|e| Error::io(&path, e))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

/// Enumerate `root/<split>/<class>/*.{png,jpg,jpeg}`, returning the manifest and each sample's file.
///
/// Class directories other than `real` become methods. Their order follows the
/// vocabulary of `root/manifest.tsv` when one exists (so a written corpus scans
/// back to the same label indices) and is lexicographic otherwise.
pub fn scan_with_paths(root: &Path) -> Result<(CorpusManifest, Vec<PathBuf>)> {
    if !root.is_dir() {
        return Err(Error::NotFound(root.to_path_buf()));
    }
    let mut found: Vec<(Split, String, String, PathBuf)> = Vec::new();
    for split in Split::ALL {
        let split_dir = root.join(split.as_str());
        if !split_dir.is_dir() {
            continue;
        }
        for class_dir in sorted_entries(&split_dir)?.into_iter().filter(|p| p.is_dir()) {
            let class = class_dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
            for file in sorted_entries(&class_dir)?.into_iter().filter(|p| p.is_file()) {
                let ext = file
                    .extension()
                    .map(|e| e.to_string_lossy().to_ascii_lowercase())
                    .unwrap_or_default();
                if !IMAGE_EXTENSIONS.contains(&ext.as_str()) {
                    warn!("skipping {}: unrecognized extension", file.display());
                    continue;
                }
                let stem = file.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                found.push((split, class.clone(), stem, file));
            }
        }
    }
    if found.is_empty() {
        return Err(Error::EmptyCorpus(root.to_path_buf()));
    }

    let methods: BTreeSet<&str> = found
        .iter()
        .map(|(_, c, _, _)| c.as_str())
        .filter(|&c| c != REAL_CLASS)
        .collect();
    let mut vocab = vec![REAL_CLASS.to_owned()];
    if let Some(prior) = read_manifest(root).ok().flatten() {
        vocab.extend(
            prior.method_vocabulary[1..]
                .iter()
                .filter(|m| methods.contains(m.as_str()))
                .cloned(),
        );
    }
    let mut rest: Vec<&str> = methods.into_iter().filter(|m| !vocab.iter().any(|v| v == m)).collect();
    rest.sort_unstable();
    vocab.extend(rest.into_iter().map(str::to_owned));
    let index: BTreeMap<&str, usize> = vocab.iter().enumerate().map(|(i, m)| (m.as_str(), i)).collect();

    let mut samples = Vec::with_capacity(found.len());
    let mut paths = Vec::with_capacity(found.len());
    for (split, class, stem, path) in &found {
        let y_prime = index[class.as_str()];
        samples.push(SampleRecord {
            sample_id: format!("{class}/{stem}"),
            source_id: source_of_stem(stem).to_owned(),
            y: if y_prime == 0 { LABEL_REAL } else { LABEL_FAKE },
            y_prime,
            split: *split,
        });
        paths.push(path.clone());
    }
    Ok((CorpusManifest::new(samples, vocab)?, paths))
}

/// Manifest of an on-disk corpus laid out as `root/<split>/<class>/<stem>.<ext>`.
pub fn scan_dataset_dir(root: &Path) -> Result<CorpusManifest> {
    scan_with_paths(root).map(|(m, _)| m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, y: usize, yp: usize, split: Split) -> SampleRecord {
        SampleRecord {
            sample_id: id.into(),
            source_id: source_of_stem(id.split_once('/').unwrap().1).into(),
            y,
            y_prime: yp,
            split,
        }
    }

    fn manifest() -> CorpusManifest {
        CorpusManifest::new(
            vec![
                rec("real/s1", 0, 0, Split::Train),
                rec("A/s1_0", 1, 1, Split::Train),
                rec("B/s2_0", 1, 2, Split::Test),
            ],
            vec!["real".into(), "A".into(), "B".into()],
        )
        .unwrap()
    }

    #[test]
    fn tsv_round_trip() {
        let m = manifest();
        assert_eq!(CorpusManifest::from_tsv(&m.to_tsv()).unwrap(), m);
    }

    #[test]
    fn contract_violations() {
        let mut dup = manifest().samples;
        dup.push(dup[0].clone());
        assert!(matches!(
            CorpusManifest::new(dup, vec!["real".into(), "A".into(), "B".into()]),
            Err(Error::DuplicateSample(_))
        ));
        let bad = vec![rec("real/s1", 0, 1, Split::Train)];
        assert!(matches!(
            CorpusManifest::new(bad, vec!["real".into(), "A".into()]),
            Err(Error::Validation { .. })
        ));
        assert!(CorpusManifest::new(vec![], vec!["A".into()]).is_err());
    }

    #[test]
    fn method_filtering() {
        let m = manifest();
        assert_eq!(m.indices_for_methods(Split::Train, &["A"]).unwrap(), vec![0, 1]);
        assert_eq!(m.indices_for_methods(Split::Test, &["A"]).unwrap(), Vec::<usize>::new());
        assert!(m.indices_for_methods(Split::Test, &["Z"]).is_err());
    }

    #[test]
    fn stems_and_sources() {
        assert_eq!(source_of_stem("s0004_A_0001"), "s0004");
        assert_eq!(source_of_stem("s0004"), "s0004");
        let r = rec("DF/s3_9", 1, 1, Split::Train);
        assert_eq!((r.class_dir(), r.stem()), ("DF", "s3_9"));
    }
}
