//! Training loop, configuration and checkpoints.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use log::{debug, info};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::disentangler::{CrossTarget, Fusion};
use crate::error::{Error, Result};
use crate::model::{Ablation, ModelConfig, UcfModel};
use crate::nn::{Adam, AdamConfig, Graph, Tensor};
use crate::objectives::{total_loss, LossComponents, LossReport, LossWeights};
use crate::synthforge::{sample_pair_batch, AugConfig, Dataset, PairBatch, Pairing};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub backbone: BackboneConfig,
    /// Width of each decoder stage, coarsest first; one per encoder stage.
    pub decoder_widths: Vec<usize>,
    pub head_hidden: Vec<usize>,
    pub weights: LossWeights,
    pub learning_rate: f64,
    /// Fake/real pairs per step; each step sees twice as many images.
    pub batch_pairs: usize,
    pub steps: u64,
    pub seed: u64,
    pub ablation: Ablation,
    pub decoder_fusion: Fusion,
    pub cross_target: CrossTarget,
    pub pairing: Pairing,
    pub aug: AugConfig,
    /// Write a checkpoint every this many steps; 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            backbone: BackboneConfig::default(),
            decoder_widths: vec![128, 64, 32],
            head_hidden: vec![256, 256],
            weights: LossWeights::default(),
            learning_rate: 2e-4,
            batch_pairs: 16,
            steps: 2000,
            seed: 0,
            ablation: Ablation::FULL,
            decoder_fusion: Fusion::Adain,
            cross_target: CrossTarget::ContentDonor,
            pairing: Pairing::Random,
            aug: AugConfig::default(),
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::parse("train config", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("train config is always representable as TOML")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::validation("learning_rate", format!("must be > 0, got {}", self.learning_rate)));
        }
        if self.steps < 1 {
            return Err(Error::validation("steps", "must be at least 1"));
        }
        if self.batch_pairs < 2 {
            return Err(Error::validation("batch_pairs", format!("must be at least 2, got {}", self.batch_pairs)));
        }
        self.weights.validate()?;
        self.aug.validate()?;
        self.ablation.validate()?;
        self.backbone.validate()?;
        if self.decoder_widths.len() != self.backbone.widths.len() {
            return Err(Error::validation(
                "decoder_widths",
                format!("need {} stages to undo the encoder's downsampling", self.backbone.widths.len()),
            ));
        }
        Ok(())
    }

    pub fn model_config(&self, n_classes: usize) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            decoder_widths: self.decoder_widths.clone(),
            head_hidden: self.head_hidden.clone(),
            fusion: self.decoder_fusion,
            ablation: self.ablation,
            n_classes,
        }
    }
}

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: UcfModel<f32>,
    pub adam: Adam<f32>,
    pub rng: ChaCha8Rng,
    /// Number of completed steps.
    pub step: u64,
}

const SAMPLING_STREAM: u64 = 1;

impl TrainState {
    pub fn new(config: TrainConfig, n_classes: usize) -> Result<Self> {
        config.validate()?;
        let model = UcfModel::new(config.model_config(n_classes), config.seed)?;
        let adam = Adam::new(
            AdamConfig {
                learning_rate: config.learning_rate,
                ..AdamConfig::default()
            },
            &model.store,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(SAMPLING_STREAM);
        Ok(TrainState {
            config,
            model,
            adam,
            rng,
            step: 0,
        })
    }
}

fn finite_or_diverged(name: &str, v: f64, step: u64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Divergence {
            component: name.into(),
            step,
        })
    }
}

/// One optimization step on `batch`; the state is only modified when the step succeeds.
pub fn train_step(state: &mut TrainState, batch: &PairBatch) -> Result<LossReport> {
    let step = state.step + 1;
    let cfg = &state.config;
    let mut g = Graph::new();
    let losses = state.model.loss_graph(
        &mut g,
        &batch.fake_images,
        &batch.real_images,
        &batch.y,
        &batch.y_prime,
        &cfg.weights,
        cfg.cross_target,
        &mut state.rng,
    )?;
    let read = |v: Option<_>| v.map_or(0.0, |v| f64::from(g.scalar(v)));
    let components = LossComponents {
        ce_common: finite_or_diverged("ce_common", read(Some(losses.ce_common)), step)?,
        ce_specific: finite_or_diverged("ce_specific", read(losses.ce_specific), step)?,
        reconstruction: finite_or_diverged("reconstruction", read(losses.reconstruction), step)?,
        contrastive: finite_or_diverged("contrastive", read(losses.contrastive), step)?,
    };
    let report = total_loss(components, &cfg.weights).map_err(|e| match e {
        Error::Divergence { component, .. } => Error::Divergence { component, step },
        other => other,
    })?;
    let grads = g.backward(losses.total)?;
    let params = grads.params();
    if let Some((id, _)) = params.iter().find(|(_, t)| !t.is_finite()) {
        return Err(Error::Divergence {
            component: format!("gradient of {}", state.model.store.name(*id)),
            step,
        });
    }
    state.adam.step(&mut state.model.store, &params);
    for (id, value) in g.take_buffer_updates() {
        *state.model.store.get_mut(id) = value;
    }
    state.step = step;
    Ok(report)
}

/// One line of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    #[serde(flatten)]
    pub report: LossReport,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn checkpoint_name(step: u64) -> String {
    format!("step-{step:07}.ckpt")
}

/// Run from `state.step` to `config.steps`, sampling from the dataset's train split.
///
/// With `out_dir`, metrics are appended to `metrics.jsonl`, periodic checkpoints
/// are written, and `final.ckpt` is written at the end.
pub fn train_from(state: &mut TrainState, dataset: &Dataset, out_dir: Option<&Path>) -> Result<Vec<MetricRecord>> {
    let image_size = state.config.backbone.input_size;
    if dataset.image_size() != Some(image_size) {
        return Err(Error::Config(format!(
            "dataset images are {:?} pixels but the backbone expects {image_size}",
            dataset.image_size()
        )));
    }
    let mut log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(METRICS_FILE);
            let file = OpenOptions::new()
                .create(true)
                .append(state.step > 0)
                .write(true)
                .truncate(state.step == 0)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Some((BufWriter::new(file), path))
        }
        None => None,
    };
    let mut records = Vec::new();
    while state.step < state.config.steps {
        let batch = sample_pair_batch(
            dataset,
            state.config.batch_pairs,
            state.config.pairing,
            &state.config.aug,
            &mut state.rng,
        )?;
        let report = train_step(state, &batch)?;
        let rec = MetricRecord {
            step: state.step,
            report,
        };
        if state.step % 100 == 0 || state.step == 1 {
            info!(
                "step {} total {:.4} ce_c {:.4} ce_s {:.4} rec {:.4} con {:.4}",
                rec.step, report.total, report.ce_common, report.ce_specific, report.reconstruction, report.contrastive
            );
        }
        if let Some((w, path)) = log.as_mut() {
            let line = serde_json::to_string(&rec).expect("metric records serialize");
            writeln!(w, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        records.push(rec);
        if let Some(dir) = out_dir {
            let every = state.config.checkpoint_every;
            if every > 0 && state.step % every == 0 {
                save_checkpoint(state, &dir.join(checkpoint_name(state.step)))?;
            }
        }
    }
    if let Some((mut w, path)) = log {
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    if let Some(dir) = out_dir {
        save_checkpoint(state, &dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(records)
}

/// Train a fresh model for `config.steps` steps.
pub fn train(config: &TrainConfig, dataset: &Dataset, out_dir: Option<&Path>) -> Result<(TrainState, Vec<MetricRecord>)> {
    let mut state = TrainState::new(config.clone(), dataset.manifest.n_classes())?;
    let records = train_from(&mut state, dataset, out_dir)?;
    Ok((state, records))
}

/// The plain single-tower classifier trained with the common cross-entropy only.
pub fn baseline_train(config: &TrainConfig, dataset: &Dataset, out_dir: Option<&Path>) -> Result<(TrainState, Vec<MetricRecord>)> {
    let config = TrainConfig {
        ablation: Ablation::BASELINE,
        ..config.clone()
    };
    train(&config, dataset, out_dir)
}

const MAGIC: &[u8; 8] = b"UCFCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    kind: EntryKind,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
enum EntryKind {
    Param,
    Buffer,
    AdamFirst,
    AdamSecond,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    step: u64,
    config: TrainConfig,
    model: ModelConfig,
    rng: ChaCha8Rng,
    adam_steps: BTreeMap<String, u64>,
    tensors: Vec<TensorEntry>,
}

/// Single-file checkpoint: magic, version, JSON header, then little-endian `f32` payload.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let store = &state.model.store;
    let mut payload: Vec<f32> = Vec::new();
    let mut tensors = Vec::new();
    let mut adam_steps = BTreeMap::new();
    let mut push = |name: &str, kind, t: &Tensor<f32>, payload: &mut Vec<f32>| {
        tensors.push(TensorEntry {
            name: name.to_owned(),
            kind,
            shape: t.shape().to_vec(),
            offset: payload.len(),
        });
        payload.extend_from_slice(t.data());
    };
    for id in store.ids() {
        let name = store.name(id);
        let kind = if store.is_trainable(id) { EntryKind::Param } else { EntryKind::Buffer };
        push(name, kind, store.get(id), &mut payload);
        if store.is_trainable(id) {
            let (steps, m, v) = state.adam.state(id);
            adam_steps.insert(name.to_owned(), steps);
            if let (Some(m), Some(v)) = (m, v) {
                push(name, EntryKind::AdamFirst, m, &mut payload);
                push(name, EntryKind::AdamSecond, v, &mut payload);
            }
        }
    }
    let header = Header {
        version: CHECKPOINT_VERSION,
        step: state.step,
        config: state.config.clone(),
        model: state.model.config.clone(),
        rng: state.rng.clone(),
        adam_steps,
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp: PathBuf = path.with_extension("ckpt.tmp");
    {
        let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(&tmp, e);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&json).map_err(io)?;
        for v in &payload {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        w.flush().map_err(io)?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    debug!("wrote checkpoint {} at step {}", path.display(), state.step);
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
            _ => Error::io(path, e),
        })?;
    let bad = |why: &str| Error::Checkpoint(format!("{}: {why}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
    let raw = &bytes[20 + hlen..];
    if raw.len() % 4 != 0 {
        return Err(bad("payload is not a whole number of f32 values"));
    }
    let payload: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();

    let mut state = TrainState::new(header.config, header.model.n_classes)?;
    if state.model.config != header.model {
        return Err(bad("model configuration does not match the training configuration"));
    }
    let mut moments: BTreeMap<&str, (Option<Tensor<f32>>, Option<Tensor<f32>>)> = BTreeMap::new();
    let mut restored = 0;
    for e in &header.tensors {
        let len: usize = e.shape.iter().product();
        let data = payload
            .get(e.offset..e.offset + len)
            .ok_or_else(|| bad(&format!("payload too short for `{}`", e.name)))?
            .to_vec();
        let t = Tensor::from_vec(&e.shape, data)?;
        match e.kind {
            EntryKind::Param | EntryKind::Buffer => {
                let id = state
                    .model
                    .store
                    .id(&e.name)
                    .ok_or_else(|| bad(&format!("unknown tensor `{}`", e.name)))?;
                if state.model.store.get(id).shape() != t.shape() {
                    return Err(bad(&format!("shape mismatch for `{}`", e.name)));
                }
                *state.model.store.get_mut(id) = t;
                restored += 1;
            }
            EntryKind::AdamFirst => moments.entry(&e.name).or_default().0 = Some(t),
            EntryKind::AdamSecond => moments.entry(&e.name).or_default().1 = Some(t),
        }
    }
    if restored != state.model.store.len() {
        return Err(bad(&format!(
            "restored {restored} of {} tensors",
            state.model.store.len()
        )));
    }
    for (name, &steps) in &header.adam_steps {
        let id = state.model.store.id(name).ok_or_else(|| bad(&format!("unknown tensor `{name}`")))?;
        let (m, v) = moments.remove(name.as_str()).unwrap_or_default();
        state.adam.restore(id, steps, m, v)?;
    }
    state.rng = header.rng;
    state.step = header.step;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneKind;
    use crate::synthforge::{generate_synthetic_corpus, SynthSpec};

    pub(crate) fn tiny_train_config() -> TrainConfig {
        TrainConfig {
            backbone: BackboneConfig {
                name: BackboneKind::TinyCnn,
                input_size: 16,
                fingerprint_channels: 8,
                content_channels: 4,
                widths: vec![4, 8],
            },
            decoder_widths: vec![8, 4],
            head_hidden: vec![16],
            batch_pairs: 4,
            steps: 6,
            checkpoint_every: 3,
            learning_rate: 1e-3,
            ..Default::default()
        }
    }

    fn corpus() -> Dataset {
        generate_synthetic_corpus(&SynthSpec {
            n_real: 8,
            methods: vec!["A".into(), "B".into()],
            n_per_method: 8,
            image_size: 16,
            common_artifact_strength: 0.5,
            specific_artifact_strength: 0.5,
            held_out_methods: vec![],
            seed: 1,
            artifact_scale: 0.08,
        })
        .unwrap()
    }

    #[test]
    fn defaults_follow_the_paper() {
        let c = TrainConfig::default();
        assert_eq!(c.learning_rate, 2e-4);
        assert_eq!(2 * c.batch_pairs, 32);
        assert_eq!(
            (c.weights.lambda_1, c.weights.lambda_2, c.weights.lambda_3, c.weights.alpha),
            (0.1, 0.3, 0.05, 3.0)
        );
        c.validate().unwrap();
    }

    #[test]
    fn toml_round_trip_and_validation() {
        let c = tiny_train_config();
        assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
        let partial = TrainConfig::from_toml("steps = 10\nablation = \"DM\"").unwrap();
        assert_eq!(partial.steps, 10);
        assert_eq!(partial.ablation, Ablation::DM);
        for (text, field) in [
            ("learning_rate = 0.0", "learning_rate"),
            ("batch_pairs = 1", "batch_pairs"),
            ("steps = 0", "steps"),
        ] {
            match TrainConfig::from_toml(text) {
                Err(Error::Validation { field: f, .. }) => assert_eq!(f, field),
                other => panic!("{text}: {other:?}"),
            }
        }
        assert!(TrainConfig::from_toml("ablation = \"MC\"").is_err());
    }

    #[test]
    fn reports_are_finite_and_consistent() {
        let data = corpus();
        let (_, recs) = train(&tiny_train_config(), &data, None).unwrap();
        let w = LossWeights::default();
        for r in &recs {
            let p = r.report;
            for v in [p.ce_common, p.ce_specific, p.reconstruction, p.contrastive, p.total] {
                assert!(v.is_finite() && v >= 0.0);
            }
            let expect = p.ce_common + w.lambda_1 * p.ce_specific + w.lambda_2 * p.reconstruction + w.lambda_3 * p.contrastive;
            assert_eq!(p.total, expect);
        }
    }

    #[test]
    fn d_only_reports_zero_specific_and_contrastive() {
        let data = corpus();
        let cfg = TrainConfig {
            ablation: Ablation::D,
            steps: 2,
            ..tiny_train_config()
        };
        let (state, recs) = train(&cfg, &data, None).unwrap();
        for r in &recs {
            assert_eq!(r.report.ce_specific, 0.0);
            assert_eq!(r.report.contrastive, 0.0);
            assert!(r.report.reconstruction > 0.0);
        }
        let fresh = TrainState::new(cfg, data.manifest.n_classes()).unwrap();
        for id in state.model.store.ids_with_prefix(crate::heads::SPECIFIC_HEAD_PREFIX) {
            assert_eq!(state.model.store.get(id), fresh.model.store.get(id));
        }
    }

    #[test]
    fn baseline_reports_only_common_ce() {
        let data = corpus();
        let cfg = TrainConfig {
            steps: 2,
            ..tiny_train_config()
        };
        let (state, recs) = baseline_train(&cfg, &data, None).unwrap();
        assert_eq!(state.model.config.ablation, Ablation::BASELINE);
        for r in &recs {
            assert_eq!(r.report.total, r.report.ce_common);
            assert_eq!(r.report.reconstruction, 0.0);
        }
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let data = corpus();
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_train_config();
        let (_, full) = train(&cfg, &data, Some(dir.path())).unwrap();
        let mut resumed = load_checkpoint(&dir.path().join(checkpoint_name(3))).unwrap();
        assert_eq!(resumed.step, 3);
        let tail = train_from(&mut resumed, &data, None).unwrap();
        assert_eq!(&full[3..], tail.as_slice());
        let metrics = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(metrics.lines().count(), 6);
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        fs::write(&p, b"definitely not a checkpoint").unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Checkpoint(_))));
        assert!(matches!(load_checkpoint(&dir.path().join("none")), Err(Error::NotFound(_))));
    }

    #[test]
    fn image_size_mismatch_is_config_error() {
        let data = corpus();
        let cfg = TrainConfig {
            backbone: BackboneConfig {
                input_size: 32,
                ..tiny_train_config().backbone
            },
            ..tiny_train_config()
        };
        assert!(matches!(train(&cfg, &data, None), Err(Error::Config(_))));
    }
}
