//! Conditional decoding and fingerprint/content recombination.
//!
//! The decoder re-styles the content code with the fingerprint through two
//! AdaIN injections, then upsamples back to image resolution. The
//! `LinearAdd` fusion replaces both injections with element-wise addition of
//! the projected fingerprint and serves as the ablation baseline.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvSpec, Float, Graph, Init, ParamStore, Tensor, Var};

/// Variance guard used by every AdaIN evaluation.
pub const ADAIN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    Adain,
    LinearAdd,
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fusion::Adain => "adain",
            Fusion::LinearAdd => "linear_add",
        })
    }
}

impl FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adain" => Ok(Fusion::Adain),
            "linear_add" => Ok(Fusion::LinearAdd),
            _ => Err(Error::validation("fusion", format!("expected adain or linear_add, got `{s}`"))),
        }
    }
}

/// Which image a cross-reconstruction is pulled towards.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossTarget {
    /// `D(f1, c0) -> x0` and `D(f0, c1) -> x1`.
    ContentDonor,
    /// `D(f1, c0) -> x1` and `D(f0, c1) -> x0`.
    FingerprintDonor,
}

impl fmt::Display for CrossTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CrossTarget::ContentDonor => "content_donor",
            CrossTarget::FingerprintDonor => "fingerprint_donor",
        })
    }
}

impl FromStr for CrossTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "content_donor" => Ok(CrossTarget::ContentDonor),
            "fingerprint_donor" => Ok(CrossTarget::FingerprintDonor),
            _ => Err(Error::validation(
                "cross_target",
                format!("expected content_donor or fingerprint_donor, got `{s}`"),
            )),
        }
    }
}

/// Adaptive instance normalization of plain tensors (`[c, h, w]` or `[n, c, h, w]`).
///
/// Each channel of `content` is standardized with its own population statistics and
/// re-scaled to the mean and standard deviation of the same channel of `fingerprint`.
pub fn adain<T: Float>(content: &Tensor<T>, fingerprint: &Tensor<T>) -> Result<Tensor<T>> {
    let promote = |t: &Tensor<T>| -> Result<Tensor<T>> {
        match t.shape().len() {
            3 => {
                let mut s = vec![1];
                s.extend_from_slice(t.shape());
                t.clone().reshape(&s)
            }
            4 => Ok(t.clone()),
            _ => Err(Error::Shape(format!("adain expects rank 3 or 4, got {:?}", t.shape()))),
        }
    };
    let mut g = Graph::new();
    let c = g.constant(promote(content)?);
    let f = g.constant(promote(fingerprint)?);
    let out = g.adain(c, f, T::from_f64_lossy(ADAIN_EPS))?;
    g.value(out).clone().reshape(content.shape())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub fingerprint_channels: usize,
    pub content_channels: usize,
    /// Width of each conv-block + upsample stage; one stage per encoder downsampling.
    pub widths: Vec<usize>,
    pub fusion: Fusion,
}

impl DecoderConfig {
    /// Index of the stage preceded by the second fingerprint injection.
    pub fn mid_stage(&self) -> usize {
        self.widths.len() / 2
    }

    fn mid_channels(&self) -> usize {
        match self.mid_stage() {
            0 => self.content_channels,
            m => self.widths[m - 1],
        }
    }
}

/// `D(f, c)`: `[n, C_f, h, w] x [n, C_c, h, w] -> [n, 3, h * 2^S, w * 2^S]` with values in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    project_in: Conv2d,
    project_mid: Conv2d,
    stages: Vec<Conv2d>,
    to_image: Conv2d,
}

pub const DECODER_PREFIX: &str = "decoder";

impl Decoder {
    pub fn new<T: Float, R: Rng + ?Sized>(store: &mut ParamStore<T>, config: &DecoderConfig, rng: &mut R) -> Result<Self> {
        if config.widths.is_empty() || config.widths.contains(&0) {
            return Err(Error::validation("decoder_widths", "need at least one positive stage width"));
        }
        let p = DECODER_PREFIX;
        let project_in = Conv2d::new(
            store,
            &format!("{p}.project_in"),
            ConvSpec::new(config.fingerprint_channels, config.content_channels, 1, 1),
            Init::Linear,
            rng,
        );
        let project_mid = Conv2d::new(
            store,
            &format!("{p}.project_mid"),
            ConvSpec::new(config.fingerprint_channels, config.mid_channels(), 1, 1),
            Init::Linear,
            rng,
        );
        let mut c_in = config.content_channels;
        let mut stages = Vec::new();
        for (i, &w) in config.widths.iter().enumerate() {
            stages.push(Conv2d::new(
                store,
                &format!("{p}.stage{i}"),
                ConvSpec::new(c_in, w, 3, 1),
                Init::Relu,
                rng,
            ));
            c_in = w;
        }
        let to_image = Conv2d::new(store, &format!("{p}.to_image"), ConvSpec::new(c_in, 3, 3, 1), Init::Linear, rng);
        Ok(Decoder {
            config: config.clone(),
            project_in,
            project_mid,
            stages,
            to_image,
        })
    }

    fn fuse<T: Float>(&self, g: &mut Graph<T>, x: Var, condition: Var) -> Result<Var> {
        match self.config.fusion {
            Fusion::Adain => g.adain(x, condition, T::from_f64_lossy(ADAIN_EPS)),
            Fusion::LinearAdd => {
                let xs = g.value(x).shape()[2];
                let cs = g.value(condition).shape()[2];
                let up = if xs == cs { condition } else { g.upsample(condition, xs / cs)? };
                g.add(x, up)
            }
        }
    }

    pub fn decode_graph<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, fingerprint: Var, content: Var) -> Result<Var> {
        let (fn_, fc, fh, fw) = g.value(fingerprint).dims4()?;
        let (cn, cc, ch, cw) = g.value(content).dims4()?;
        if fn_ != cn || fh != ch || fw != cw || fc != self.config.fingerprint_channels || cc != self.config.content_channels {
            return Err(Error::Shape(format!(
                "decoder expects fingerprint [n, {}, h, w] and content [n, {}, h, w], got {:?} and {:?}",
                self.config.fingerprint_channels,
                self.config.content_channels,
                g.value(fingerprint).shape(),
                g.value(content).shape()
            )));
        }
        let cond = self.project_in.forward(g, store, fingerprint)?;
        let mut x = self.fuse(g, content, cond)?;
        for (i, conv) in self.stages.iter().enumerate() {
            if i == self.config.mid_stage() {
                let cond = self.project_mid.forward(g, store, fingerprint)?;
                x = self.fuse(g, x, cond)?;
            }
            let y = conv.forward(g, store, x)?;
            let y = g.relu(y);
            x = g.upsample(y, 2)?;
        }
        let out = self.to_image.forward(g, store, x)?;
        Ok(g.sigmoid(out))
    }

    pub fn decode<T: Float>(&self, store: &ParamStore<T>, fingerprint: &Tensor<T>, content: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let f = g.constant(fingerprint.clone());
        let c = g.constant(content.clone());
        let out = self.decode_graph(&mut g, store, f, c)?;
        Ok(g.value(out).clone())
    }

    /// Decode all four fingerprint/content combinations of a fake/real pair batch
    /// in a single pass. `f*` are whole fingerprints (`[specific | common]`).
    pub fn recombine_graph<T: Float>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        f0: Var,
        c0: Var,
        f1: Var,
        c1: Var,
    ) -> Result<ReconstructionVars> {
        let n = g.value(f0).shape()[0];
        if g.value(f1).shape()[0] != n || g.value(c0).shape()[0] != n || g.value(c1).shape()[0] != n {
            return Err(Error::Shape("recombined halves must have equal batch size".into()));
        }
        let fingerprints = g.concat_rows(&[f0, f1, f1, f0])?;
        let contents = g.concat_rows(&[c0, c1, c0, c1])?;
        let all = self.decode_graph(g, store, fingerprints, contents)?;
        let part = |g: &mut Graph<T>, k: usize| g.select_rows(all, &(k * n..(k + 1) * n).collect::<Vec<_>>());
        Ok(ReconstructionVars {
            self_0: part(g, 0)?,
            self_1: part(g, 1)?,
            cross_0: part(g, 2)?,
            cross_1: part(g, 3)?,
        })
    }

    /// Evaluation of [`Decoder::recombine_graph`] on two encoded batches.
    pub fn recombine_and_decode<T: Float>(
        &self,
        store: &ParamStore<T>,
        bundle_0: &crate::backbone::LatentBundle<T>,
        bundle_1: &crate::backbone::LatentBundle<T>,
    ) -> Result<ReconstructionSet<T>> {
        let mut g = Graph::new();
        let whole = |g: &mut Graph<T>, b: &crate::backbone::LatentBundle<T>| -> Result<(Var, Var)> {
            let s = g.constant(b.f_specific.clone());
            let c = g.constant(b.f_common.clone());
            Ok((g.concat_channels(&[s, c])?, g.constant(b.content.clone())))
        };
        let (f0, c0) = whole(&mut g, bundle_0)?;
        let (f1, c1) = whole(&mut g, bundle_1)?;
        let r = self.recombine_graph(&mut g, store, f0, c0, f1, c1)?;
        Ok(ReconstructionSet {
            self_0: g.value(r.self_0).clone(),
            self_1: g.value(r.self_1).clone(),
            cross_0: g.value(r.cross_0).clone(),
            cross_1: g.value(r.cross_1).clone(),
        })
    }
}

/// Graph handles of the four decodes `D(f0,c0)`, `D(f1,c1)`, `D(f1,c0)`, `D(f0,c1)`.
#[derive(Clone, Copy, Debug)]
pub struct ReconstructionVars {
    pub self_0: Var,
    pub self_1: Var,
    pub cross_0: Var,
    pub cross_1: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionSet<T: Float = f32> {
    pub self_0: Tensor<T>,
    pub self_1: Tensor<T>,
    pub cross_0: Tensor<T>,
    pub cross_1: Tensor<T>,
}
