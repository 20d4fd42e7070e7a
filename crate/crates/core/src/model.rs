//! The assembled detector: encoders, decoder and heads for one ablation variant.
//!
//! Variants mirror the ablation ladder. `none` is a single-tower binary
//! classifier. `D` adds the content tower, the decoder and the reconstruction
//! loss, with the binary head reading the whole fingerprint because nothing
//! yet separates its halves. `M` splits the fingerprint, putting the binary
//! head on the common half and the method head on the specific half. `C` adds
//! the triplet regularizer.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{baseline_tower, BackboneConfig, ConvEncoder, Encoder, LatentBundle};
use crate::disentangler::{CrossTarget, Decoder, DecoderConfig, Fusion};
use crate::error::{Error, Result};
use crate::heads::{Head, HeadConfig, COMMON_HEAD_PREFIX, SPECIFIC_HEAD_PREFIX};
use crate::nn::{Float, Graph, Mode, ParamStore, Tensor, Var};
use crate::objectives::{
    common_ce_graph, contrastive_graph, reconstruction_graph, sample_triplets, specific_ce_graph, LossWeights,
};
use crate::LABEL_FAKE;

/// Which parts of the framework are switched on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Ablation {
    pub disentangle: bool,
    pub multitask: bool,
    pub contrastive: bool,
}

impl Ablation {
    pub const BASELINE: Ablation = Ablation {
        disentangle: false,
        multitask: false,
        contrastive: false,
    };
    pub const D: Ablation = Ablation {
        disentangle: true,
        ..Self::BASELINE
    };
    pub const DM: Ablation = Ablation {
        multitask: true,
        ..Self::D
    };
    pub const FULL: Ablation = Ablation {
        contrastive: true,
        ..Self::DM
    };
    /// The ablation ladder, weakest first.
    pub const LADDER: [Ablation; 4] = [Self::BASELINE, Self::D, Self::DM, Self::FULL];

    pub fn validate(&self) -> Result<()> {
        if (self.multitask || self.contrastive) && !self.disentangle {
            return Err(Error::validation(
                "ablation",
                "multi-task and contrastive terms require disentanglement (D)",
            ));
        }
        Ok(())
    }

    pub fn key(&self) -> String {
        if !self.disentangle {
            return "none".into();
        }
        let mut s = String::from("D");
        if self.multitask {
            s.push('M');
        }
        if self.contrastive {
            s.push('C');
        }
        s
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::validation("ablation", format!("expected none, D, DM, DC or DMC, got `{s}`"));
        if s.eq_ignore_ascii_case("none") {
            return Ok(Self::BASELINE);
        }
        let mut a = Self::BASELINE;
        for c in s.chars() {
            let slot = match c.to_ascii_uppercase() {
                'D' => &mut a.disentangle,
                'M' => &mut a.multitask,
                'C' => &mut a.contrastive,
                _ => return Err(bad()),
            };
            if *slot {
                return Err(bad());
            }
            *slot = true;
        }
        if s.is_empty() {
            return Err(bad());
        }
        a.validate()?;
        Ok(a)
    }
}

impl TryFrom<String> for Ablation {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Ablation> for String {
    fn from(a: Ablation) -> String {
        a.key()
    }
}

/// Architecture of a model variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub decoder_widths: Vec<usize>,
    pub head_hidden: Vec<usize>,
    pub fusion: Fusion,
    pub ablation: Ablation,
    /// Size of the method vocabulary including `real`.
    pub n_classes: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.ablation.validate()?;
        if self.decoder_widths.len() != self.backbone.widths.len() {
            return Err(Error::validation(
                "decoder_widths",
                format!(
                    "need one stage per encoder downsampling ({}), got {}",
                    self.backbone.widths.len(),
                    self.decoder_widths.len()
                ),
            ));
        }
        if self.n_classes < 2 {
            return Err(Error::validation("n_classes", "need `real` plus at least one method"));
        }
        Ok(())
    }

    /// Channels read by the binary head.
    fn detection_channels(&self) -> usize {
        if self.ablation.multitask {
            self.backbone.half_channels()
        } else {
            self.backbone.fingerprint_channels
        }
    }
}

#[derive(Clone, Debug)]
enum Body {
    Baseline(ConvEncoder),
    Disentangled { encoder: Encoder, decoder: Decoder },
}

/// Pooled per-image features of one kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Specific,
    Common,
    Whole,
    Content,
}

impl FeatureKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKind::Specific => "specific",
            FeatureKind::Common => "common",
            FeatureKind::Whole => "whole",
            FeatureKind::Content => "content",
        }
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "specific" => Ok(FeatureKind::Specific),
            "common" => Ok(FeatureKind::Common),
            "whole" => Ok(FeatureKind::Whole),
            "content" => Ok(FeatureKind::Content),
            _ => Err(Error::validation(
                "feature",
                format!("expected specific, common, whole or content, got `{s}`"),
            )),
        }
    }
}

/// Graph handles of one step's loss terms; disabled terms are `None`.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub ce_common: Var,
    pub ce_specific: Option<Var>,
    pub reconstruction: Option<Var>,
    pub contrastive: Option<Var>,
}

/// Evaluation batches are processed in chunks of this many images.
const EVAL_CHUNK: usize = 64;

#[derive(Clone, Debug)]
pub struct UcfModel<T: Float = f32> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    body: Body,
    head_common: Head,
    head_specific: Head,
}

impl<T: Float> UcfModel<T> {
    /// Fresh model with parameters drawn from a generator seeded by `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let body = if config.ablation.disentangle {
            let encoder = Encoder::new(&mut store, &config.backbone, &mut rng)?;
            let decoder = Decoder::new(
                &mut store,
                &DecoderConfig {
                    fingerprint_channels: config.backbone.fingerprint_channels,
                    content_channels: config.backbone.content_channels,
                    widths: config.decoder_widths.clone(),
                    fusion: config.fusion,
                },
                &mut rng,
            )?;
            Body::Disentangled { encoder, decoder }
        } else {
            Body::Baseline(baseline_tower(&mut store, &config.backbone, &mut rng)?)
        };
        let head_common = Head::new(
            &mut store,
            COMMON_HEAD_PREFIX,
            config.detection_channels(),
            &HeadConfig {
                hidden_dims: config.head_hidden.clone(),
                n_classes: 2,
            },
            &mut rng,
        )?;
        // Always built so every variant has the same checkpoint layout; it only
        // receives gradient when the multi-task term is on.
        let head_specific = Head::new(
            &mut store,
            SPECIFIC_HEAD_PREFIX,
            config.backbone.half_channels(),
            &HeadConfig {
                hidden_dims: config.head_hidden.clone(),
                n_classes: config.n_classes,
            },
            &mut rng,
        )?;
        Ok(UcfModel {
            config,
            store,
            body,
            head_common,
            head_specific,
        })
    }

    pub fn encoder(&self) -> Option<&Encoder> {
        match &self.body {
            Body::Disentangled { encoder, .. } => Some(encoder),
            Body::Baseline(_) => None,
        }
    }

    pub fn decoder(&self) -> Option<&Decoder> {
        match &self.body {
            Body::Disentangled { decoder, .. } => Some(decoder),
            Body::Baseline(_) => None,
        }
    }

    /// The feature map the binary head reads.
    fn detection_feature(&self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<Var> {
        match &self.body {
            Body::Baseline(tower) => tower.forward(g, &self.store, x, mode),
            Body::Disentangled { encoder, .. } => {
                let f = encoder.fingerprint_graph(g, &self.store, x, mode)?;
                self.detection_half(g, f)
            }
        }
    }

    fn detection_half(&self, g: &mut Graph<T>, fingerprint: Var) -> Result<Var> {
        if self.config.ablation.multitask {
            let half = self.config.backbone.half_channels();
            g.slice_channels(fingerprint, half, half)
        } else {
            Ok(fingerprint)
        }
    }

    fn check_images(&self, x: &Tensor<T>) -> Result<()> {
        let s = self.config.backbone.input_size;
        match x.shape() {
            [_, 3, h, w] if *h == s && *w == s => Ok(()),
            other => Err(Error::Shape(format!("expected images [n, 3, {s}, {s}], got {other:?}"))),
        }
    }

    fn chunked(&self, x: &Tensor<T>, mut f: impl FnMut(&Tensor<T>) -> Result<Tensor<T>>) -> Result<Tensor<T>> {
        self.check_images(x)?;
        let n = x.shape()[0];
        let mut parts = Vec::new();
        for start in (0..n).step_by(EVAL_CHUNK) {
            let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
            parts.push(f(&x.select_rows(&idx))?);
        }
        if parts.is_empty() {
            return Ok(Tensor::zeros(&[0, 0]));
        }
        Tensor::stack_rows(&parts.iter().collect::<Vec<_>>())
    }

    /// Fake probability of each image, from the binary head on the detection feature only.
    pub fn detect(&self, x: &Tensor<T>) -> Result<Vec<T>> {
        let probs = self.chunked(x, |chunk| {
            let mut g = Graph::new();
            let xv = g.constant(chunk.clone());
            let feat = self.detection_feature(&mut g, xv, Mode::Eval)?;
            let logits = self.head_common.forward_graph(&mut g, &self.store, feat)?;
            Ok(softmax_fake(g.value(logits)))
        })?;
        Ok(probs.into_data())
    }

    /// Scores computed from an already-encoded fingerprint map `[n, C_f, h, w]`.
    pub fn detect_from_fingerprint(&self, fingerprint: &Tensor<T>) -> Result<Vec<T>> {
        if !self.config.ablation.disentangle {
            return Err(Error::Config("the baseline has no fingerprint encoder".into()));
        }
        let mut g = Graph::new();
        let f = g.constant(fingerprint.clone());
        let feat = self.detection_half(&mut g, f)?;
        let logits = self.head_common.forward_graph(&mut g, &self.store, feat)?;
        Ok(softmax_fake(g.value(logits)).into_data())
    }

    /// Evaluation-mode fingerprint map of each image.
    pub fn fingerprint(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let encoder = self.require_encoder()?;
        self.check_images(x)?;
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let f = encoder.fingerprint_graph(&mut g, &self.store, xv, Mode::Eval)?;
        Ok(g.value(f).clone())
    }

    fn require_encoder(&self) -> Result<&Encoder> {
        self.encoder()
            .ok_or_else(|| Error::Config("the baseline variant has no latent factorization".into()))
    }

    pub fn encode(&self, x: &Tensor<T>) -> Result<LatentBundle<T>> {
        let encoder = self.require_encoder()?;
        self.check_images(x)?;
        encoder.encode(&self.store, x)
    }

    /// Spatially pooled features `[n, d]` of the requested kind.
    pub fn features(&self, x: &Tensor<T>, kind: FeatureKind) -> Result<Tensor<T>> {
        let encoder = self.require_encoder()?;
        self.chunked(x, |chunk| {
            let mut g = Graph::new();
            let xv = g.constant(chunk.clone());
            let lat = encoder.encode_graph(&mut g, &self.store, xv, Mode::Eval)?;
            let map = match kind {
                FeatureKind::Specific => lat.f_specific,
                FeatureKind::Common => lat.f_common,
                FeatureKind::Whole => lat.fingerprint,
                FeatureKind::Content => lat.content,
            };
            let pooled = g.global_avg_pool(map)?;
            Ok(g.value(pooled).clone())
        })
    }

    /// All enabled loss terms for a pair batch (`x0` fakes, `x1` reals) in training mode.
    ///
    /// `y`/`y_prime` label `[x0..., x1...]`; `rng` draws the triplets.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_graph<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        x0: &Tensor<T>,
        x1: &Tensor<T>,
        y: &[usize],
        y_prime: &[usize],
        weights: &LossWeights,
        cross_target: CrossTarget,
        rng: &mut R,
    ) -> Result<LossVars> {
        self.check_images(x0)?;
        self.check_images(x1)?;
        let n = x0.shape()[0];
        if x1.shape()[0] != n || y.len() != 2 * n || y_prime.len() != 2 * n {
            return Err(Error::Shape(format!(
                "pair batch of {n}/{} images with {} and {} labels",
                x1.shape()[0],
                y.len(),
                y_prime.len()
            )));
        }
        if y[..n].iter().any(|&l| l != LABEL_FAKE) || y[n..].iter().any(|&l| l == LABEL_FAKE) {
            return Err(Error::validation("labels", "x0 must hold the fakes and x1 the reals"));
        }
        let a = self.config.ablation;
        let x = g.constant(Tensor::stack_rows(&[x0, x1])?.reshape(&[2 * n, 3, x0.shape()[2], x0.shape()[3]])?);
        let lam = |v: f64| T::from_f64_lossy(v);

        let Body::Disentangled { encoder, decoder } = &self.body else {
            let feat = self.detection_feature(g, x, Mode::Train)?;
            let logits = self.head_common.forward_graph(g, &self.store, feat)?;
            let ce_common = common_ce_graph(g, logits, y)?;
            return Ok(LossVars {
                total: ce_common,
                ce_common,
                ce_specific: None,
                reconstruction: None,
                contrastive: None,
            });
        };

        let lat = encoder.encode_graph(g, &self.store, x, Mode::Train)?;
        let detect_feat = self.detection_half(g, lat.fingerprint)?;
        let logits = self.head_common.forward_graph(g, &self.store, detect_feat)?;
        let ce_common = common_ce_graph(g, logits, y)?;
        let mut terms = vec![(ce_common, T::one())];

        let ce_specific = if a.multitask {
            let logits = self.head_specific.forward_graph(g, &self.store, lat.f_specific)?;
            let v = specific_ce_graph(g, logits, y_prime, self.config.n_classes)?;
            terms.push((v, lam(weights.lambda_1)));
            Some(v)
        } else {
            None
        };

        let first: Vec<usize> = (0..n).collect();
        let second: Vec<usize> = (n..2 * n).collect();
        let f0 = g.select_rows(lat.fingerprint, &first)?;
        let f1 = g.select_rows(lat.fingerprint, &second)?;
        let c0 = g.select_rows(lat.content, &first)?;
        let c1 = g.select_rows(lat.content, &second)?;
        let recs = decoder.recombine_graph(g, &self.store, f0, c0, f1, c1)?;
        let reconstruction = reconstruction_graph(g, x0, x1, &recs, cross_target)?;
        terms.push((reconstruction, lam(weights.lambda_2)));

        let contrastive = if a.contrastive {
            let (common_idx, specific_idx) = sample_triplets(y, y_prime, rng)?;
            let mut v = contrastive_graph(g, detect_feat, &common_idx, weights.alpha)?;
            if a.multitask {
                let s = contrastive_graph(g, lat.f_specific, &specific_idx, weights.alpha)?;
                v = g.add(v, s)?;
            }
            terms.push((v, lam(weights.lambda_3)));
            Some(v)
        } else {
            None
        };

        let total = g.weighted_sum(&terms)?;
        Ok(LossVars {
            total,
            ce_common,
            ce_specific,
            reconstruction: Some(reconstruction),
            contrastive,
        })
    }
}

/// Column 1 of the row-wise softmax of `[n, 2]` logits, as `[n, 1]`.
fn softmax_fake<T: Float>(logits: &Tensor<T>) -> Tensor<T> {
    let n = logits.shape()[0];
    Tensor::from_fn(&[n, 1], |i| {
        let r = logits.row(i);
        // p1 = 1 / (1 + exp(l0 - l1)), stable for either sign.
        let d = r[0] - r[1];
        if d > T::zero() {
            let e = (-d).exp();
            e / (T::one() + e)
        } else {
            T::one() / (T::one() + d.exp())
        }
    })
}
