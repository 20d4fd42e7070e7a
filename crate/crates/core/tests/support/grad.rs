//! Analytic gradients of the decoder and every loss term against central differences,
//! in double precision on models of at most 1k parameters and inputs of at most 8x8.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ucf_forge::backbone::{BackboneConfig, BackboneKind};
use ucf_forge::disentangler::{CrossTarget, Decoder, DecoderConfig, Fusion};
use ucf_forge::heads::{Head, HeadConfig};
use ucf_forge::model::{Ablation, ModelConfig, UcfModel};
use ucf_forge::nn::{Graph, ParamId, ParamStore, Tensor, Var};
use ucf_forge::objectives::{self, LossWeights, TripletIndices};

const H: f64 = 1e-5;
const TOL: f64 = 1e-3;
const MAX_PARAMS: usize = 1000;

fn noise(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// `||a - n|| / max(||a||, ||n||)` over all coordinates of one gradient.
fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale = analytic
        .iter()
        .map(|a| a * a)
        .sum::<f64>()
        .sqrt()
        .max(numeric.iter().map(|n| n * n).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// A scalar built from a parameter store and some input tensors.
trait Objective {
    fn build(&self, g: &mut Graph<f64>, store: &ParamStore<f64>, inputs: &[Var]) -> Var;
}

impl<F: Fn(&mut Graph<f64>, &ParamStore<f64>, &[Var]) -> Var> Objective for F {
    fn build(&self, g: &mut Graph<f64>, store: &ParamStore<f64>, inputs: &[Var]) -> Var {
        self(g, store, inputs)
    }
}

fn evaluate(obj: &impl Objective, store: &ParamStore<f64>, inputs: &[Tensor<f64>]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = obj.build(&mut g, store, &vars);
    g.scalar(out)
}

/// Check d(objective)/d(every input) and d(objective)/d(every trainable parameter).
fn check(label: &str, obj: impl Objective, store: &ParamStore<f64>, inputs: &[Tensor<f64>]) -> Result<(), String> {
    if store.num_trainable_scalars() > MAX_PARAMS {
        return Err(format!("{label}: model too large"));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = obj.build(&mut g, store, &vars);
    let grads = g.backward(out).map_err(|e| format!("{label}: {e}"))?;

    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        let numeric: Vec<f64> = (0..t.len())
            .map(|i| {
                let eval = |d: f64| {
                    let mut shifted = inputs.to_vec();
                    shifted[k].data_mut()[i] += d;
                    evaluate(&obj, store, &shifted)
                };
                (eval(H) - eval(-H)) / (2.0 * H)
            })
            .collect();
        let e = rel_err(analytic.data(), &numeric);
        if e >= TOL {
            return Err(format!("{label}: input {k} relative error {e:.2e}"));
        }
    }

    let param_grads: std::collections::HashMap<ParamId, Tensor<f64>> = grads.params().into_iter().collect();
    let mut checked = 0;
    for id in store.trainable_ids().collect::<Vec<_>>() {
        let shape = store.get(id).shape().to_vec();
        let analytic = param_grads.get(&id).cloned().unwrap_or_else(|| Tensor::zeros(&shape));
        let numeric: Vec<f64> = (0..analytic.len())
            .map(|i| {
                let eval = |d: f64| {
                    let mut s = store.clone();
                    s.get_mut(id).data_mut()[i] += d;
                    evaluate(&obj, &s, inputs)
                };
                (eval(H) - eval(-H)) / (2.0 * H)
            })
            .collect();
        let e = rel_err(analytic.data(), &numeric);
        if e >= TOL {
            return Err(format!("{label}: parameter {} relative error {e:.2e}", store.name(id)));
        }
        checked += 1;
    }
    if checked == 0 && !store.is_empty() {
        return Err(format!("{label}: no parameter gradients checked"));
    }
    Ok(())
}

fn decoder(fusion: Fusion) -> (ParamStore<f64>, Decoder) {
    let mut store = ParamStore::new();
    let cfg = DecoderConfig {
        fingerprint_channels: 4,
        content_channels: 3,
        widths: vec![4, 3],
        fusion,
    };
    let dec = Decoder::new(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    (store, dec)
}

pub fn decode() -> Result<(), String> {
    for fusion in [Fusion::Adain, Fusion::LinearAdd] {
        let (store, dec) = decoder(fusion);
        let target = noise(&[2, 3, 8, 8], 1, 0.0, 1.0);
        check(
            &format!("decode/{fusion}"),
            |g: &mut Graph<f64>, s: &ParamStore<f64>, v: &[Var]| {
                let out = dec.decode_graph(g, s, v[0], v[1]).unwrap();
                g.l1_mean(out, &target).unwrap()
            },
            &store,
            &[noise(&[2, 4, 2, 2], 2, -1.0, 1.0), noise(&[2, 3, 2, 2], 3, -1.0, 1.0)],
        )?;
    }
    Ok(())
}

pub fn reconstruction() -> Result<(), String> {
    let (store, dec) = decoder(Fusion::Adain);
    let x0 = noise(&[2, 3, 8, 8], 4, 0.0, 1.0);
    let x1 = noise(&[2, 3, 8, 8], 5, 0.0, 1.0);
    for cross in [CrossTarget::ContentDonor, CrossTarget::FingerprintDonor] {
        check(
            &format!("reconstruction/{cross}"),
            |g: &mut Graph<f64>, s: &ParamStore<f64>, v: &[Var]| {
                let recs = dec.recombine_graph(g, s, v[0], v[1], v[2], v[3]).unwrap();
                objectives::reconstruction_graph(g, &x0, &x1, &recs, cross).unwrap()
            },
            &store,
            &[
                noise(&[2, 4, 2, 2], 6, -1.0, 1.0),
                noise(&[2, 3, 2, 2], 7, -1.0, 1.0),
                noise(&[2, 4, 2, 2], 8, -1.0, 1.0),
                noise(&[2, 3, 2, 2], 9, -1.0, 1.0),
            ],
        )?;
    }
    Ok(())
}

fn head(n_classes: usize) -> (ParamStore<f64>, Head) {
    let mut store = ParamStore::new();
    let cfg = HeadConfig {
        hidden_dims: vec![6],
        n_classes,
    };
    let h = Head::new(&mut store, "head", 4, &cfg, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    (store, h)
}

pub fn common_ce() -> Result<(), String> {
    let (store, h) = head(2);
    let y = [1, 1, 0, 0, 1];
    check(
        "common CE",
        |g: &mut Graph<f64>, s: &ParamStore<f64>, v: &[Var]| {
            let logits = h.forward_graph(g, s, v[0]).unwrap();
            objectives::common_ce_graph(g, logits, &y).unwrap()
        },
        &store,
        &[noise(&[5, 4, 2, 2], 12, -1.0, 1.0)],
    )
}

pub fn specific_ce() -> Result<(), String> {
    let (store, h) = head(4);
    let y_prime = [1, 2, 3, 0, 0, 2];
    check(
        "specific CE",
        |g: &mut Graph<f64>, s: &ParamStore<f64>, v: &[Var]| {
            let logits = h.forward_graph(g, s, v[0]).unwrap();
            objectives::specific_ce_graph(g, logits, &y_prime, 4).unwrap()
        },
        &store,
        &[noise(&[6, 4, 2, 2], 13, -1.0, 1.0)],
    )
}

pub fn contrastive() -> Result<(), String> {
    let idx = TripletIndices {
        anchors: vec![0, 1, 2],
        positives: vec![1, 2, 0],
        negatives: vec![3, 4, 3],
    };
    // A large margin keeps every triplet active; a small one leaves some at the hinge's flat side.
    for alpha in [3.0, 0.5] {
        check(
            &format!("contrastive alpha={alpha}"),
            |g: &mut Graph<f64>, _: &ParamStore<f64>, v: &[Var]| objectives::contrastive_graph(g, v[0], &idx, alpha).unwrap(),
            &ParamStore::new(),
            &[noise(&[5, 4, 2, 2], 14, -1.0, 1.0)],
        )?;
    }
    Ok(())
}

pub fn total_objective() -> Result<(), String> {
    let config = ModelConfig {
        backbone: BackboneConfig {
            name: BackboneKind::TinyCnn,
            input_size: 8,
            fingerprint_channels: 4,
            content_channels: 2,
            widths: vec![2, 3],
        },
        decoder_widths: vec![3, 2],
        head_hidden: vec![3],
        fusion: Fusion::Adain,
        ablation: Ablation::FULL,
        n_classes: 3,
    };
    let model: UcfModel<f64> = UcfModel::new(config, 5).unwrap();
    let x0 = noise(&[3, 3, 8, 8], 15, 0.0, 1.0);
    let x1 = noise(&[3, 3, 8, 8], 16, 0.0, 1.0);
    let y = [1, 1, 1, 0, 0, 0];
    let y_prime = [1, 1, 2, 0, 0, 0];
    let weights = LossWeights::default();
    let build = |g: &mut Graph<f64>, s: &ParamStore<f64>, _: &[Var]| {
        let mut m = model.clone();
        m.store = s.clone();
        // Same triplets on every evaluation.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        m.loss_graph(g, &x0, &x1, &y, &y_prime, &weights, CrossTarget::ContentDonor, &mut rng)
            .unwrap()
            .total
    };
    check("total objective", build, &model.store, &[])
}

/// Every gradient check, by name.
pub const ALL: [(&str, fn() -> Result<(), String>); 6] = [
    ("decode", decode),
    ("reconstruction", reconstruction),
    ("common CE", common_ce),
    ("specific CE", specific_ce),
    ("contrastive", contrastive),
    ("total objective", total_objective),
];
