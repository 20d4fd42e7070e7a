//! Dual encoder: a content encoder and a fingerprint encoder with identical
//! topology and disjoint parameters. The fingerprint map is split channel-wise
//! into a method-specific half and a method-common half.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, ConvSpec, Float, Graph, Init, Mode, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    TinyCnn,
    XceptionStyle,
}

impl BackboneKind {
    /// Registry of available backbones, keyed by config name.
    pub const REGISTRY: [(&'static str, BackboneKind); 2] = [
        ("tiny_cnn", BackboneKind::TinyCnn),
        ("xception_style", BackboneKind::XceptionStyle),
    ];

    pub fn key(self) -> &'static str {
        match self {
            BackboneKind::TinyCnn => "tiny_cnn",
            BackboneKind::XceptionStyle => "xception_style",
        }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::REGISTRY
            .iter()
            .find(|(k, _)| *k == s)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::validation("backbone", format!("unknown backbone `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub name: BackboneKind,
    pub input_size: usize,
    /// Fingerprint channels; the first half is the specific feature, the second the common feature.
    pub fingerprint_channels: usize,
    pub content_channels: usize,
    /// Output width of each stride-2 stage.
    pub widths: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            name: BackboneKind::TinyCnn,
            input_size: 64,
            fingerprint_channels: 64,
            content_channels: 64,
            widths: vec![32, 64, 128],
        }
    }
}

impl BackboneConfig {
    pub fn downsample_factor(&self) -> usize {
        1 << self.widths.len()
    }

    pub fn latent_size(&self) -> usize {
        self.input_size / self.downsample_factor()
    }

    pub fn half_channels(&self) -> usize {
        self.fingerprint_channels / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.fingerprint_channels == 0 || self.fingerprint_channels % 2 != 0 {
            return Err(Error::validation(
                "fingerprint_channels",
                format!("must be a positive even count, got {}", self.fingerprint_channels),
            ));
        }
        if self.content_channels == 0 {
            return Err(Error::validation("content_channels", "must be positive"));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::validation("widths", "need at least one positive stage width"));
        }
        let f = self.downsample_factor();
        if self.input_size == 0 || self.input_size % f != 0 {
            return Err(Error::validation(
                "input_size",
                format!("{} is not divisible by the downsampling factor {f}", self.input_size),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Stage {
    Plain {
        conv: Conv2d,
        bn: BatchNorm2d,
    },
    Xception {
        dw1: Conv2d,
        pw1: Conv2d,
        bn1: BatchNorm2d,
        dw2: Conv2d,
        pw2: Conv2d,
        bn2: BatchNorm2d,
        skip: Conv2d,
        skip_bn: BatchNorm2d,
    },
}

/// One convolutional tower, `[n, 3, s, s] -> [n, out_channels, s/f, s/f]`.
#[derive(Clone, Debug)]
pub struct ConvEncoder {
    stages: Vec<Stage>,
    exit: Vec<Conv2d>,
    out_channels: usize,
}

impl ConvEncoder {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        kind: BackboneKind,
        widths: &[usize],
        out_channels: usize,
        rng: &mut R,
    ) -> Self {
        let mut stages = Vec::with_capacity(widths.len());
        let mut c_in = 3;
        for (i, &w) in widths.iter().enumerate() {
            let p = format!("{prefix}.stage{i}");
            let stage = if kind == BackboneKind::TinyCnn || i == 0 {
                Stage::Plain {
                    conv: Conv2d::new(store, &format!("{p}.conv"), ConvSpec::new(c_in, w, 3, 2).without_bias(), Init::Relu, rng),
                    bn: BatchNorm2d::new(store, &format!("{p}.bn"), w),
                }
            } else {
                Stage::Xception {
                    dw1: Conv2d::new(store, &format!("{p}.sep1.dw"), ConvSpec::depthwise(c_in, 3, 1), Init::Relu, rng),
                    pw1: Conv2d::new(store, &format!("{p}.sep1.pw"), ConvSpec::new(c_in, w, 1, 1).without_bias(), Init::Relu, rng),
                    bn1: BatchNorm2d::new(store, &format!("{p}.bn1"), w),
                    dw2: Conv2d::new(store, &format!("{p}.sep2.dw"), ConvSpec::depthwise(w, 3, 2), Init::Relu, rng),
                    pw2: Conv2d::new(store, &format!("{p}.sep2.pw"), ConvSpec::new(w, w, 1, 1).without_bias(), Init::Relu, rng),
                    bn2: BatchNorm2d::new(store, &format!("{p}.bn2"), w),
                    skip: Conv2d::new(store, &format!("{p}.skip"), ConvSpec::new(c_in, w, 1, 2).without_bias(), Init::Linear, rng),
                    skip_bn: BatchNorm2d::new(store, &format!("{p}.skip_bn"), w),
                }
            };
            stages.push(stage);
            c_in = w;
        }
        let exit = match kind {
            BackboneKind::TinyCnn => vec![Conv2d::new(
                store,
                &format!("{prefix}.exit"),
                ConvSpec::new(c_in, out_channels, 3, 1),
                Init::Linear,
                rng,
            )],
            BackboneKind::XceptionStyle => vec![
                Conv2d::new(store, &format!("{prefix}.exit.dw"), ConvSpec::depthwise(c_in, 3, 1), Init::Relu, rng),
                Conv2d::new(
                    store,
                    &format!("{prefix}.exit.pw"),
                    ConvSpec::new(c_in, out_channels, 1, 1),
                    Init::Linear,
                    rng,
                ),
            ],
        };
        ConvEncoder {
            stages,
            exit,
            out_channels,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let mut h = x;
        for stage in &self.stages {
            h = match stage {
                Stage::Plain { conv, bn } => {
                    let y = conv.forward(g, store, h)?;
                    let y = bn.forward(g, store, y, mode)?;
                    g.relu(y)
                }
                Stage::Xception {
                    dw1,
                    pw1,
                    bn1,
                    dw2,
                    pw2,
                    bn2,
                    skip,
                    skip_bn,
                } => {
                    let a = g.relu(h);
                    let a = dw1.forward(g, store, a)?;
                    let a = pw1.forward(g, store, a)?;
                    let a = bn1.forward(g, store, a, mode)?;
                    let a = g.relu(a);
                    let a = dw2.forward(g, store, a)?;
                    let a = pw2.forward(g, store, a)?;
                    let a = bn2.forward(g, store, a, mode)?;
                    let s = skip.forward(g, store, h)?;
                    let s = skip_bn.forward(g, store, s, mode)?;
                    let sum = g.add(a, s)?;
                    g.relu(sum)
                }
            };
        }
        for conv in &self.exit {
            h = conv.forward(g, store, h)?;
        }
        Ok(h)
    }
}

/// Graph handles of one encoded batch.
#[derive(Clone, Copy, Debug)]
pub struct LatentVars {
    /// Whole fingerprint map, `[specific | common]` along channels.
    pub fingerprint: Var,
    pub f_specific: Var,
    pub f_common: Var,
    pub content: Var,
}

/// Encoded batch: specific fingerprint, common fingerprint and content code, each `[n, c, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentBundle<T: Float = f32> {
    pub f_specific: Tensor<T>,
    pub f_common: Tensor<T>,
    pub content: Tensor<T>,
}

impl<T: Float> LatentBundle<T> {
    pub fn len(&self) -> usize {
        self.content.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Bundle restricted to the images at `indices`.
    pub fn select(&self, indices: &[usize]) -> Self {
        LatentBundle {
            f_specific: self.f_specific.select_rows(indices),
            f_common: self.f_common.select_rows(indices),
            content: self.content.select_rows(indices),
        }
    }
}

/// The content encoder `encoder.content.*` and the fingerprint encoder `encoder.fingerprint.*`.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: BackboneConfig,
    content: ConvEncoder,
    fingerprint: ConvEncoder,
}

pub const CONTENT_PREFIX: &str = "encoder.content";
pub const FINGERPRINT_PREFIX: &str = "encoder.fingerprint";

impl Encoder {
    pub fn new<T: Float, R: Rng + ?Sized>(store: &mut ParamStore<T>, config: &BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let content = ConvEncoder::new(store, CONTENT_PREFIX, config.name, &config.widths, config.content_channels, rng);
        let fingerprint = ConvEncoder::new(
            store,
            FINGERPRINT_PREFIX,
            config.name,
            &config.widths,
            config.fingerprint_channels,
            rng,
        );
        Ok(Encoder {
            config: config.clone(),
            content,
            fingerprint,
        })
    }

    fn check_input<T: Float>(&self, x: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        let s = self.config.input_size;
        if c != 3 || h != s || w != s {
            return Err(Error::Config(format!(
                "encoder expects [n, 3, {s}, {s}] images, got {:?}",
                x.shape()
            )));
        }
        Ok(())
    }

    /// Fingerprint map only; the content tower is not evaluated.
    pub fn fingerprint_graph<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        self.check_input(g.value(x))?;
        self.fingerprint.forward(g, store, x, mode)
    }

    pub fn split_fingerprint<T: Float>(&self, g: &mut Graph<T>, fingerprint: Var) -> Result<(Var, Var)> {
        let half = self.config.half_channels();
        Ok((g.slice_channels(fingerprint, 0, half)?, g.slice_channels(fingerprint, half, half)?))
    }

    pub fn encode_graph<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<LatentVars> {
        let fingerprint = self.fingerprint_graph(g, store, x, mode)?;
        let content = self.content.forward(g, store, x, mode)?;
        let (f_specific, f_common) = self.split_fingerprint(g, fingerprint)?;
        Ok(LatentVars {
            fingerprint,
            f_specific,
            f_common,
            content,
        })
    }

    /// Evaluation-mode encoding of an image batch `[n, 3, s, s]`.
    pub fn encode<T: Float>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<LatentBundle<T>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let lat = self.encode_graph(&mut g, store, xv, Mode::Eval)?;
        Ok(LatentBundle {
            f_specific: g.value(lat.f_specific).clone(),
            f_common: g.value(lat.f_common).clone(),
            content: g.value(lat.content).clone(),
        })
    }
}

/// Single-tower classifier backbone for the plain baseline; stored under `encoder.fingerprint.*`.
pub fn baseline_tower<T: Float, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    config: &BackboneConfig,
    rng: &mut R,
) -> Result<ConvEncoder> {
    config.validate()?;
    Ok(ConvEncoder::new(
        store,
        FINGERPRINT_PREFIX,
        config.name,
        &config.widths,
        config.fingerprint_channels,
        rng,
    ))
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn setup(kind: BackboneKind) -> (ParamStore<f32>, Encoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = BackboneConfig {
            name: kind,
            ..BackboneConfig::default()
        };
        let enc = Encoder::new(&mut store, &cfg, &mut rng).unwrap();
        (store, enc)
    }

    fn images(n: usize) -> Tensor<f32> {
        Tensor::from_fn(&[n, 3, 64, 64], |i| ((i * 7919) % 255) as f32 / 255.0)
    }

    #[test]
    fn tiny_cnn_shape_contract() {
        let (store, enc) = setup(BackboneKind::TinyCnn);
        let b = enc.encode(&store, &images(2)).unwrap();
        assert_eq!(b.f_specific.shape(), &[2, 32, 8, 8]);
        assert_eq!(b.f_common.shape(), &[2, 32, 8, 8]);
        assert_eq!(b.content.shape(), &[2, 64, 8, 8]);
    }

    #[test]
    fn xception_style_shape_contract() {
        let (store, enc) = setup(BackboneKind::XceptionStyle);
        let b = enc.encode(&store, &images(1)).unwrap();
        assert_eq!(b.f_common.shape(), &[1, 32, 8, 8]);
        assert_eq!(b.content.shape(), &[1, 64, 8, 8]);
        assert!(b.content.is_finite());
    }

    #[test]
    fn towers_share_topology_but_not_parameters() {
        let (store, _) = setup(BackboneKind::TinyCnn);
        let content: BTreeSet<_> = store.ids_with_prefix(CONTENT_PREFIX).collect();
        let fingerprint: BTreeSet<_> = store.ids_with_prefix(FINGERPRINT_PREFIX).collect();
        assert!(!content.is_empty());
        assert!(content.is_disjoint(&fingerprint));
        let strip = |p: &str, ids: &BTreeSet<_>| -> Vec<(String, Vec<usize>)> {
            ids.iter()
                .map(|&id| (store.name(id)[p.len()..].to_string(), store.get(id).shape().to_vec()))
                .collect()
        };
        let mut a = strip(CONTENT_PREFIX, &content);
        let mut b = strip(FINGERPRINT_PREFIX, &fingerprint);
        // Only the exit width differs when C_c != C_f; here both are 64.
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn evaluation_encoding_is_deterministic() {
        let (store, enc) = setup(BackboneKind::TinyCnn);
        let x = images(2);
        assert_eq!(enc.encode(&store, &x).unwrap(), enc.encode(&store, &x).unwrap());
    }

    #[test]
    fn wrong_input_size_is_a_config_error() {
        let (store, enc) = setup(BackboneKind::TinyCnn);
        let x = Tensor::<f32>::zeros(&[1, 3, 32, 32]);
        assert!(matches!(enc.encode(&store, &x), Err(Error::Config(_))));
    }

    #[test]
    fn config_validation_names_fields() {
        let odd = BackboneConfig {
            fingerprint_channels: 7,
            ..BackboneConfig::default()
        };
        assert!(matches!(odd.validate(), Err(Error::Validation { field, .. }) if field == "fingerprint_channels"));
        let bad_size = BackboneConfig {
            input_size: 60,
            ..BackboneConfig::default()
        };
        assert!(matches!(bad_size.validate(), Err(Error::Validation { field, .. }) if field == "input_size"));
        assert_eq!("xception_style".parse::<BackboneKind>().unwrap(), BackboneKind::XceptionStyle);
        assert!("convnext".parse::<BackboneKind>().is_err());
    }

    #[test]
    fn common_loss_sends_no_gradient_to_content_tower() {
        let (store, enc) = setup(BackboneKind::TinyCnn);
        let mut g = Graph::new();
        let x = g.constant(images(2));
        let lat = enc.encode_graph(&mut g, &store, x, Mode::Train).unwrap();
        let pooled = g.global_avg_pool(lat.f_common).unwrap();
        let target = Tensor::zeros(g.value(pooled).shape());
        let loss = g.l1_mean(pooled, &target).unwrap();
        let grads = g.backward(loss).unwrap().params();
        assert!(!grads.is_empty());
        for (id, _) in &grads {
            assert!(!store.name(*id).starts_with(CONTENT_PREFIX), "{}", store.name(*id));
        }

        let mut g = Graph::new();
        let x = g.constant(images(2));
        let lat = enc.encode_graph(&mut g, &store, x, Mode::Train).unwrap();
        let pooled = g.global_avg_pool(lat.content).unwrap();
        let target = Tensor::zeros(g.value(pooled).shape());
        let loss = g.l1_mean(pooled, &target).unwrap();
        for (id, _) in g.backward(loss).unwrap().params() {
            assert!(!store.name(id).starts_with(FINGERPRINT_PREFIX));
        }
    }
}
