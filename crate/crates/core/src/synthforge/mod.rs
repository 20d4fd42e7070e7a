//! Synthetic forgery corpus, on-disk ingestion and paired batch sampling.
//!
//! Every synthetic fake is its source's pristine image plus two additive
//! signals: one common template shared by all methods and one template per
//! method. The templates are mutually orthogonal, so "common" versus
//! "specific" evidence is known by construction.

mod augment;
mod manifest;
mod render;

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use augment::{apply_augmentations, jpeg_round_trip, rgb_to_tensor, tensor_to_rgb, AugConfig};
pub use manifest::{
    read_manifest, scan_dataset_dir, scan_with_paths, source_of_stem, write_manifest, CorpusManifest, SampleRecord, Split,
    MANIFEST_FILE, REAL_CLASS,
};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::{LABEL_FAKE, LABEL_REAL};

/// Fraction of source identities assigned to the train split.
pub const TRAIN_FRACTION: f64 = 0.8;

/// Parameters of a synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_real: usize,
    pub methods: Vec<String>,
    pub n_per_method: usize,
    pub image_size: usize,
    pub common_artifact_strength: f64,
    pub specific_artifact_strength: f64,
    #[serde(default)]
    pub held_out_methods: Vec<String>,
    pub seed: u64,
    /// RMS pixel amplitude of an artifact at strength 1.
    #[serde(default = "default_artifact_scale")]
    pub artifact_scale: f64,
}

fn default_artifact_scale() -> f64 {
    0.015
}

impl SynthSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: SynthSpec = toml::from_str(text).map_err(|e| Error::parse("synth spec", e))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_real < 1 {
            return Err(Error::validation("n_real", "must be at least 1"));
        }
        if self.n_per_method < 1 {
            return Err(Error::validation("n_per_method", "must be at least 1"));
        }
        if self.image_size < 16 {
            return Err(Error::validation("image_size", format!("must be at least 16, got {}", self.image_size)));
        }
        for (field, v) in [
            ("common_artifact_strength", self.common_artifact_strength),
            ("specific_artifact_strength", self.specific_artifact_strength),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::validation(field, format!("must be in [0, 1], got {v}")));
            }
        }
        if !(self.artifact_scale.is_finite() && self.artifact_scale >= 0.0) {
            return Err(Error::validation("artifact_scale", "must be finite and >= 0"));
        }
        if self.methods.is_empty() {
            return Err(Error::validation("methods", "need at least one forgery method"));
        }
        let mut seen = BTreeSet::new();
        for m in &self.methods {
            let bad_char = m.chars().any(|c| c.is_whitespace() || matches!(c, '/' | '\\' | '\t'));
            if m.is_empty() || m == REAL_CLASS || bad_char || m.starts_with('.') {
                return Err(Error::validation("methods", format!("`{m}` is not a usable method name")));
            }
            if !seen.insert(m.as_str()) {
                return Err(Error::validation("methods", format!("duplicate method `{m}`")));
            }
        }
        if let Some(h) = self.held_out_methods.iter().find(|h| !seen.contains(h.as_str())) {
            return Err(Error::validation("held_out_methods", format!("`{h}` is not one of the methods")));
        }
        Ok(())
    }
}

/// A manifest together with its decoded images (same order).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: CorpusManifest,
    pub images: Vec<RgbImage>,
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn field_to_rgb(field: &[f64], size: usize) -> RgbImage {
    RgbImage::from_fn(size as u32, size as u32, |x, y| {
        let at = |c: usize| to_u8(field[(c * size + y as usize) * size + x as usize]);
        image::Rgb([at(0), at(1), at(2)])
    })
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const SPLIT_STREAM: u64 = 1;
const TEMPLATE_STREAM: u64 = 2;
const SOURCE_STREAM_BASE: u64 = 1 << 32;

fn source_name(i: usize) -> String {
    format!("s{i:05}")
}

/// Deterministic render of the corpus described by `spec`.
///
/// Source `i` yields `real/s<i>`; fake `j` of method `m` is rendered from source
/// `j mod n_real` as `m/s<src>_<j>`. Sources are split train/test as a whole;
/// held-out methods only appear in the test split.
pub fn generate_synthetic_corpus(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let size = spec.image_size;
    let mut order: Vec<usize> = (0..spec.n_real).collect();
    order.shuffle(&mut stream_rng(spec.seed, SPLIT_STREAM));
    let n_train = ((spec.n_real as f64 * TRAIN_FRACTION).round() as usize).clamp(1, spec.n_real);
    let mut source_split = vec![Split::Test; spec.n_real];
    for &i in &order[..n_train] {
        source_split[i] = Split::Train;
    }

    let (common, specific) = render::artifact_templates(size, spec.methods.len(), &mut stream_rng(spec.seed, TEMPLATE_STREAM));
    let bases: Vec<Vec<f64>> = (0..spec.n_real)
        .map(|i| render::render_face(size, &mut stream_rng(spec.seed, SOURCE_STREAM_BASE + i as u64)))
        .collect();

    let mut vocab = vec![REAL_CLASS.to_owned()];
    vocab.extend(spec.methods.iter().cloned());
    let mut samples = Vec::with_capacity(spec.n_real + spec.methods.len() * spec.n_per_method);
    let mut images = Vec::with_capacity(samples.capacity());
    for (i, base) in bases.iter().enumerate() {
        samples.push(SampleRecord {
            sample_id: format!("{REAL_CLASS}/{}", source_name(i)),
            source_id: source_name(i),
            y: LABEL_REAL,
            y_prime: 0,
            split: source_split[i],
        });
        images.push(field_to_rgb(base, size));
    }
    let a_common = spec.artifact_scale * spec.common_artifact_strength;
    let a_specific = spec.artifact_scale * spec.specific_artifact_strength;
    for (m, method) in spec.methods.iter().enumerate() {
        let held_out = spec.held_out_methods.contains(method);
        for j in 0..spec.n_per_method {
            let src = j % spec.n_real;
            let fake: Vec<f64> = bases[src]
                .iter()
                .zip(&common)
                .zip(&specific[m])
                .map(|((b, c), s)| b + a_common * c + a_specific * s)
                .collect();
            samples.push(SampleRecord {
                sample_id: format!("{method}/{}_{j:05}", source_name(src)),
                source_id: source_name(src),
                y: LABEL_FAKE,
                y_prime: m + 1,
                split: if held_out { Split::Test } else { source_split[src] },
            });
            images.push(field_to_rgb(&fake, size));
        }
    }
    Ok(Dataset {
        manifest: CorpusManifest::new(samples, vocab)?,
        images,
    })
}

/// The common artifact template of `spec` at unit RMS (`[3, s, s]`, channel-first).
pub fn common_template(spec: &SynthSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let (common, _) =
        render::artifact_templates(spec.image_size, spec.methods.len(), &mut stream_rng(spec.seed, TEMPLATE_STREAM));
    Ok(common)
}

/// Inner product of two channel-first fields.
pub fn projection(a: &[f64], b: &[f64]) -> f64 {
    render::projection(a, b)
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_size(&self) -> Option<usize> {
        self.images.first().map(|i| i.width() as usize)
    }

    /// `[3, s, s]` float view of image `i`.
    pub fn image(&self, i: usize) -> Tensor<f32> {
        rgb_to_tensor(&self.images[i])
    }

    /// `[n, 3, s, s]` batch of the images at `indices`.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        let parts: Vec<Tensor<f32>> = indices.iter().map(|&i| self.image(i)).collect();
        let refs: Vec<&Tensor<f32>> = parts.iter().collect();
        if refs.is_empty() {
            let s = self.image_size().unwrap_or(0);
            return Ok(Tensor::zeros(&[0, 3, s, s]));
        }
        let stacked = Tensor::stack_rows(&refs)?;
        let s = self.images[indices[0]].width() as usize;
        stacked.reshape(&[indices.len(), 3, s, s])
    }

    /// SHA-256 over the manifest text and every image's raw bytes.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.manifest.to_tsv().as_bytes());
        for img in &self.images {
            h.update(img.width().to_le_bytes());
            h.update(img.height().to_le_bytes());
            h.update(img.as_raw());
        }
        hex::encode(h.finalize())
    }

    /// Persist as `root/<split>/<class>/<stem>.png` plus `root/manifest.tsv`.
    pub fn write(&self, root: &Path) -> Result<()> {
        for (s, img) in self.manifest.samples.iter().zip(&self.images) {
            let dir = root.join(s.split.as_str()).join(s.class_dir());
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let path = dir.join(format!("{}.png", s.stem()));
            img.save(&path).map_err(|source| Error::Image { path, source })?;
        }
        write_manifest(&self.manifest, root)
    }

    /// Scan and decode an on-disk corpus. Images are resized to `resize` when given,
    /// otherwise they must all share one square size.
    pub fn load(root: &Path, resize: Option<usize>) -> Result<Self> {
        let (manifest, paths) = scan_with_paths(root)?;
        let mut images = Vec::with_capacity(paths.len());
        let mut size = resize;
        for path in &paths {
            let img = image::open(path)
                .map_err(|source| Error::Image {
                    path: path.clone(),
                    source,
                })?
                .to_rgb8();
            let target = *size.get_or_insert(img.width() as usize);
            let img = if img.width() as usize == target && img.height() as usize == target {
                img
            } else if resize.is_some() {
                image::imageops::resize(&img, target as u32, target as u32, image::imageops::FilterType::Triangle)
            } else {
                return Err(Error::Shape(format!(
                    "{} is {}x{}, expected {target}x{target}",
                    path.display(),
                    img.width(),
                    img.height()
                )));
            };
            images.push(img);
        }
        Ok(Dataset { manifest, images })
    }
}

/// How each sampled fake is matched with a real partner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    /// Reals drawn independently of the fakes.
    Random,
    /// Each fake's partner is a real of the same source identity when the train
    /// split has one, otherwise a random real.
    SourceMatched,
}

impl fmt::Display for Pairing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pairing::Random => "random",
            Pairing::SourceMatched => "source_matched",
        })
    }
}

impl FromStr for Pairing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Pairing::Random),
            "source_matched" => Ok(Pairing::SourceMatched),
            _ => Err(Error::validation("pairing", format!("expected random or source_matched, got `{s}`"))),
        }
    }
}

/// `batch_pairs` fakes (`x_0`) and as many reals (`x_1`); pair `i` is `(fake i, real pair_index[i])`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    pub fake_images: Tensor<f32>,
    pub real_images: Tensor<f32>,
    /// Manifest indices of the fakes and the reals.
    pub fake_indices: Vec<usize>,
    pub real_indices: Vec<usize>,
    /// Binary labels of `[fakes..., reals...]`.
    pub y: Vec<usize>,
    /// Method labels of `[fakes..., reals...]`.
    pub y_prime: Vec<usize>,
    pub pair_index: Vec<usize>,
}

impl PairBatch {
    pub fn n_pairs(&self) -> usize {
        self.fake_indices.len()
    }
}

/// Draw the manifest indices of a pair batch from the train split.
pub fn sample_pair_indices<R: Rng + ?Sized>(
    manifest: &CorpusManifest,
    batch_pairs: usize,
    pairing: Pairing,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let train = manifest.split_indices(Split::Train);
    let fakes: Vec<usize> = train.iter().copied().filter(|&i| manifest.samples[i].is_fake()).collect();
    let reals: Vec<usize> = train.iter().copied().filter(|&i| !manifest.samples[i].is_fake()).collect();
    if fakes.is_empty() || reals.is_empty() {
        return Err(Error::InsufficientData(format!(
            "train split has {} fakes and {} reals; need at least one of each",
            fakes.len(),
            reals.len()
        )));
    }
    let mut real_by_source: HashMap<&str, Vec<usize>> = HashMap::new();
    for &r in &reals {
        real_by_source.entry(manifest.samples[r].source_id.as_str()).or_default().push(r);
    }
    let mut fake_out = Vec::with_capacity(batch_pairs);
    let mut real_out = Vec::with_capacity(batch_pairs);
    for _ in 0..batch_pairs {
        let f = fakes[rng.random_range(0..fakes.len())];
        let pool = match pairing {
            Pairing::Random => &reals,
            Pairing::SourceMatched => real_by_source
                .get(manifest.samples[f].source_id.as_str())
                .unwrap_or(&reals),
        };
        fake_out.push(f);
        real_out.push(pool[rng.random_range(0..pool.len())]);
    }
    Ok((fake_out, real_out))
}

/// Sample, load and augment one pair batch.
pub fn sample_pair_batch<R: Rng + ?Sized>(
    dataset: &Dataset,
    batch_pairs: usize,
    pairing: Pairing,
    aug: &AugConfig,
    rng: &mut R,
) -> Result<PairBatch> {
    let m = &dataset.manifest;
    let (fakes, reals) = sample_pair_indices(m, batch_pairs, pairing, rng)?;
    let load = |idx: &[usize], rng: &mut R| -> Result<Tensor<f32>> {
        let imgs = idx
            .iter()
            .map(|&i| apply_augmentations(&dataset.image(i), aug, rng))
            .collect::<Result<Vec<_>>>()?;
        let s = dataset.image_size().unwrap_or(0);
        Tensor::stack_rows(&imgs.iter().collect::<Vec<_>>())?.reshape(&[idx.len(), 3, s, s])
    };
    let fake_images = load(&fakes, rng)?;
    let real_images = load(&reals, rng)?;
    let y = fakes.iter().chain(&reals).map(|&i| m.samples[i].y).collect();
    let y_prime = fakes.iter().chain(&reals).map(|&i| m.samples[i].y_prime).collect();
    Ok(PairBatch {
        fake_images,
        real_images,
        pair_index: (0..fakes.len()).collect(),
        fake_indices: fakes,
        real_indices: reals,
        y,
        y_prime,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_spec() -> SynthSpec {
        SynthSpec {
            n_real: 10,
            methods: vec!["A".into(), "B".into(), "C".into()],
            n_per_method: 10,
            image_size: 16,
            common_artifact_strength: 0.5,
            specific_artifact_strength: 0.5,
            held_out_methods: vec!["C".into()],
            seed: 7,
            artifact_scale: default_artifact_scale(),
        }
    }

    #[test]
    fn counts_and_determinism() {
        let spec = SynthSpec {
            n_real: 100,
            n_per_method: 100,
            ..small_spec()
        };
        let a = generate_synthetic_corpus(&spec).unwrap();
        assert_eq!(a.len(), 400);
        assert_eq!(a.manifest.method_vocabulary, ["real", "A", "B", "C"]);
        let b = generate_synthetic_corpus(&spec).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
        let other = generate_synthetic_corpus(&SynthSpec { seed: 8, ..spec }).unwrap();
        assert_ne!(a.content_hash(), other.content_hash());
    }

    #[test]
    fn held_out_method_only_in_test() {
        let d = generate_synthetic_corpus(&small_spec()).unwrap();
        let c = d.manifest.method_index("C").unwrap();
        for s in &d.manifest.samples {
            if s.y_prime == c {
                assert_eq!(s.split, Split::Test);
            }
        }
        assert!(d.manifest.split_indices(Split::Train).len() > 0);
    }

    #[test]
    fn sources_do_not_straddle_splits() {
        let d = generate_synthetic_corpus(&small_spec()).unwrap();
        let mut split_of = HashMap::new();
        for s in d.manifest.samples.iter().filter(|s| s.y_prime != 3) {
            let prev = split_of.insert(s.source_id.clone(), s.split);
            assert!(prev.is_none() || prev == Some(s.split));
        }
    }

    #[test]
    fn fake_minus_base_projects_onto_common_template() {
        let spec = small_spec();
        let d = generate_synthetic_corpus(&spec).unwrap();
        let common = common_template(&spec).unwrap();
        let field = |i: usize| -> Vec<f64> { d.image(i).data().iter().map(|&v| f64::from(v)).collect() };
        let real_of: HashMap<&str, usize> = d
            .manifest
            .samples
            .iter()
            .enumerate()
            .filter(|(_, s)| !s.is_fake())
            .map(|(i, s)| (s.source_id.as_str(), i))
            .collect();
        for (i, s) in d.manifest.samples.iter().enumerate() {
            let base = field(real_of[s.source_id.as_str()]);
            let diff: Vec<f64> = field(i).iter().zip(&base).map(|(a, b)| a - b).collect();
            let p = projection(&diff, &common);
            if s.is_fake() {
                assert!(p > 0.0, "{} projects to {p}", s.sample_id);
            } else {
                assert!(p.abs() < 1e-6);
            }
        }
    }

    #[test]
    fn validation_names_fields() {
        let cases: Vec<(SynthSpec, &str)> = vec![
            (
                SynthSpec {
                    common_artifact_strength: 1.5,
                    ..small_spec()
                },
                "common_artifact_strength",
            ),
            (
                SynthSpec {
                    held_out_methods: vec!["Z".into()],
                    ..small_spec()
                },
                "held_out_methods",
            ),
            (
                SynthSpec {
                    image_size: 8,
                    ..small_spec()
                },
                "image_size",
            ),
            (SynthSpec { n_real: 0, ..small_spec() }, "n_real"),
        ];
        for (spec, want) in cases {
            match generate_synthetic_corpus(&spec) {
                Err(Error::Validation { field, .. }) => assert_eq!(field, want),
                other => panic!("expected validation error on {want}, got {other:?}"),
            }
        }
    }

    #[test]
    fn spec_from_toml() {
        let text = r#"
            n_real = 4
            methods = ["A", "B"]
            n_per_method = 2
            image_size = 16
            common_artifact_strength = 0.5
            specific_artifact_strength = 0.25
            held_out_methods = ["B"]
            seed = 3
        "#;
        let s = SynthSpec::from_toml(text).unwrap();
        assert_eq!(s.methods, ["A", "B"]);
        assert_eq!(s.artifact_scale, default_artifact_scale());
        assert!(SynthSpec::from_toml("n_real = 4\nbogus = 1").is_err());
    }

    #[test]
    fn write_then_scan_is_identity() {
        let d = generate_synthetic_corpus(&small_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.write(dir.path()).unwrap();
        let scanned = scan_dataset_dir(dir.path()).unwrap();
        assert_eq!(scanned.sorted(), d.manifest.sorted());
        let loaded = Dataset::load(dir.path(), None).unwrap();
        let by_id: HashMap<&str, usize> = loaded
            .manifest
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| (s.sample_id.as_str(), i))
            .collect();
        for (i, s) in d.manifest.samples.iter().enumerate() {
            assert_eq!(d.images[i], loaded.images[by_id[s.sample_id.as_str()]]);
        }
    }

    #[test]
    fn pair_batches() {
        let d = generate_synthetic_corpus(&small_spec()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = sample_pair_batch(&d, 8, Pairing::Random, &AugConfig::default(), &mut rng).unwrap();
        assert_eq!(b.fake_images.shape(), &[8, 3, 16, 16]);
        assert_eq!(&b.y[..8], &[1; 8]);
        assert_eq!(&b.y[8..], &[0; 8]);
        assert!(b.fake_images.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let c = d.manifest.method_index("C").unwrap();
        for _ in 0..20 {
            let (f, _) = sample_pair_indices(&d.manifest, 8, Pairing::Random, &mut rng).unwrap();
            assert!(f.iter().all(|&i| d.manifest.samples[i].y_prime != c));
        }
        let ids = |seed| sample_pair_indices(&d.manifest, 8, Pairing::Random, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert_eq!(ids(5), ids(5));
    }

    #[test]
    fn source_matched_pairs_share_identity() {
        let d = generate_synthetic_corpus(&small_spec()).unwrap();
        let m = &d.manifest;
        let (f, r) = sample_pair_indices(m, 16, Pairing::SourceMatched, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        for (a, b) in f.iter().zip(&r) {
            assert_eq!(m.samples[*a].source_id, m.samples[*b].source_id);
        }
    }

    #[test]
    fn insufficient_data() {
        let d = generate_synthetic_corpus(&small_spec()).unwrap();
        let only_reals: Vec<SampleRecord> = d.manifest.samples.iter().filter(|s| !s.is_fake()).cloned().collect();
        let m = CorpusManifest::new(only_reals, d.manifest.method_vocabulary.clone()).unwrap();
        let r = sample_pair_indices(&m, 4, Pairing::Random, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(r, Err(Error::InsufficientData(_))));
    }

    #[test]
    fn scan_errors_and_stray_files() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            scan_dataset_dir(&dir.path().join("missing")),
            Err(Error::NotFound(_))
        ));
        assert!(matches!(scan_dataset_dir(dir.path()), Err(Error::EmptyCorpus(_))));
        let img = RgbImage::from_pixel(16, 16, image::Rgb([10, 20, 30]));
        for (class, n) in [("real", 10), ("DF", 10)] {
            let p = dir.path().join("train").join(class);
            fs::create_dir_all(&p).unwrap();
            for i in 0..n {
                img.save(p.join(format!("v{i}_{class}.png"))).unwrap();
            }
        }
        fs::write(dir.path().join("train/DF/notes.txt"), "x").unwrap();
        let m = scan_dataset_dir(dir.path()).unwrap();
        assert_eq!(m.len(), 20);
        assert_eq!(m.method_vocabulary, ["real", "DF"]);
    }
}
