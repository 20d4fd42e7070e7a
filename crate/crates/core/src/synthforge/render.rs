//! Procedural face proxies and artifact templates.
//!
//! Everything here is plain `f64` arithmetic plus `sqrt` (no transcendental
//! library calls), so rendered bytes do not depend on the platform's libm.

use rand::Rng;

/// Channel-first `[3, s, s]` float image.
pub(crate) type Field = Vec<f64>;

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn mix(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// Bilinear value noise on a `cells x cells` lattice, in `[-1, 1]`.
struct ValueNoise {
    cells: usize,
    lattice: Vec<f64>,
}

impl ValueNoise {
    fn new<R: Rng + ?Sized>(cells: usize, rng: &mut R) -> Self {
        let n = cells + 1;
        ValueNoise {
            cells,
            lattice: (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    fn at(&self, u: f64, v: f64) -> f64 {
        let n = self.cells + 1;
        let (gx, gy) = (u.clamp(0.0, 1.0) * self.cells as f64, v.clamp(0.0, 1.0) * self.cells as f64);
        let (x0, y0) = ((gx as usize).min(self.cells - 1), (gy as usize).min(self.cells - 1));
        let (tx, ty) = (smoothstep(0.0, 1.0, gx - x0 as f64), smoothstep(0.0, 1.0, gy - y0 as f64));
        let l = |x: usize, y: usize| self.lattice[y * n + x];
        mix(mix(l(x0, y0), l(x0 + 1, y0), tx), mix(l(x0, y0 + 1), l(x0 + 1, y0 + 1), tx), ty)
    }
}

/// A pristine face-like image: background gradient, skin ellipse with shading,
/// eyes and mouth, mapped to `[0.15, 0.85]` and perturbed by sensor noise.
pub(crate) fn render_face<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Field {
    let bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.9));
    let ramp = [rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4)];
    let tone = rng.random_range(0.45..0.95);
    let skin = [tone, tone * rng.random_range(0.7..0.85), tone * rng.random_range(0.55..0.7)];
    let (cx, cy) = (rng.random_range(0.44..0.56), rng.random_range(0.46..0.58));
    let (rx, ry) = (rng.random_range(0.26..0.34), rng.random_range(0.34..0.42));
    let eye_dx = rx * rng.random_range(0.32..0.42);
    let eye_y = cy - ry * rng.random_range(0.15..0.28);
    let eye_r = rx * rng.random_range(0.1..0.16);
    let mouth_y = cy + ry * rng.random_range(0.4..0.55);
    let (mouth_w, mouth_h) = (rx * rng.random_range(0.3..0.5), ry * rng.random_range(0.05..0.1));
    let shading = ValueNoise::new(4, rng);
    let texture = ValueNoise::new(12, rng);

    let s = size as f64;
    let mut out = vec![0.0; 3 * size * size];
    for yi in 0..size {
        for xi in 0..size {
            let (u, v) = ((xi as f64 + 0.5) / s, (yi as f64 + 0.5) / s);
            let r_face = (((u - cx) / rx).powi(2) + ((v - cy) / ry).powi(2)).sqrt();
            let face = 1.0 - smoothstep(0.92, 1.08, r_face);
            let shade = 1.0 + 0.15 * shading.at(u, v) + 0.05 * texture.at(u, v);
            let eye = [cx - eye_dx, cx + eye_dx]
                .iter()
                .map(|&ex| {
                    let d = (((u - ex) / eye_r).powi(2) + ((v - eye_y) / (0.7 * eye_r)).powi(2)).sqrt();
                    1.0 - smoothstep(0.8, 1.2, d)
                })
                .fold(0.0, f64::max);
            let dm = (((u - cx) / mouth_w).powi(2) + ((v - mouth_y) / mouth_h).powi(2)).sqrt();
            let mouth = 1.0 - smoothstep(0.8, 1.2, dm);
            for ch in 0..3 {
                let back = bg[ch] + ramp[0] * (u - 0.5) + ramp[1] * (v - 0.5);
                let mut c = mix(back, skin[ch] * shade, face);
                c = mix(c, 0.12 * skin[ch], eye * face);
                c = mix(c, [0.55, 0.2, 0.22][ch], 0.8 * mouth * face);
                let noisy = 0.15 + 0.7 * c.clamp(0.0, 1.0) + rng.random_range(-0.01..0.01);
                out[(ch * size + yi) * size + xi] = noisy;
            }
        }
    }
    out
}

/// Per-channel box blur with clamped borders.
fn box_blur(field: &[f64], size: usize, radius: usize) -> Field {
    let r = radius as isize;
    let n = size as isize;
    let mut tmp = vec![0.0; field.len()];
    let mut out = vec![0.0; field.len()];
    let idx = |ch: usize, y: isize, x: isize| (ch * size + y.clamp(0, n - 1) as usize) * size + x.clamp(0, n - 1) as usize;
    let norm = (2 * radius + 1) as f64;
    for ch in 0..3 {
        for y in 0..n {
            for x in 0..n {
                tmp[idx(ch, y, x)] = (-r..=r).map(|d| field[idx(ch, y, x + d)]).sum::<f64>() / norm;
            }
        }
        for y in 0..n {
            for x in 0..n {
                out[idx(ch, y, x)] = (-r..=r).map(|d| tmp[idx(ch, y + d, x)]).sum::<f64>() / norm;
            }
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize_rms(v: &mut [f64]) {
    let rms = (dot(v, v) / v.len() as f64).sqrt();
    if rms > 0.0 {
        v.iter_mut().for_each(|x| *x /= rms);
    }
}

/// The common template (high-pass binary noise) followed by one template per
/// method (band-pass noise), each orthogonal to all before it and of unit RMS.
pub(crate) fn artifact_templates<R: Rng + ?Sized>(size: usize, n_methods: usize, rng: &mut R) -> (Field, Vec<Field>) {
    let len = 3 * size * size;
    let binary: Field = (0..len).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
    let blurred = box_blur(&binary, size, 1);
    let mut common: Field = binary.iter().zip(&blurred).map(|(a, b)| a - b).collect();
    normalize_rms(&mut common);

    let mut basis = vec![common.clone()];
    let mut specific = Vec::with_capacity(n_methods);
    for _ in 0..n_methods {
        let white: Field = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fine = box_blur(&white, size, 1);
        let coarse = box_blur(&white, size, 3);
        let mut p: Field = fine.iter().zip(&coarse).map(|(a, b)| a - b).collect();
        // Two Gram-Schmidt passes keep the residual overlap at rounding level.
        for _ in 0..2 {
            for b in &basis {
                let k = dot(&p, b) / dot(b, b);
                p.iter_mut().zip(b).for_each(|(x, y)| *x -= k * y);
            }
        }
        normalize_rms(&mut p);
        basis.push(p.clone());
        specific.push(p);
    }
    (common, specific)
}

pub(crate) fn projection(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn faces_stay_in_band() {
        let img = render_face(32, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(img.len(), 3 * 32 * 32);
        assert!(img.iter().all(|&v| (0.13..=0.87).contains(&v)));
    }

    #[test]
    fn templates_are_orthonormal() {
        let (c, s) = artifact_templates(16, 3, &mut ChaCha8Rng::seed_from_u64(2));
        let n = c.len() as f64;
        for t in std::iter::once(&c).chain(&s) {
            assert!((dot(t, t) / n - 1.0).abs() < 1e-9);
        }
        for (i, a) in s.iter().enumerate() {
            assert!(dot(a, &c).abs() < 1e-8);
            for b in &s[..i] {
                assert!(dot(a, b).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn common_template_is_high_frequency() {
        let (c, s) = artifact_templates(32, 1, &mut ChaCha8Rng::seed_from_u64(3));
        let energy_after_blur = |t: &Field| {
            let b = box_blur(t, 32, 1);
            dot(&b, &b) / dot(t, t)
        };
        assert!(energy_after_blur(&c) < energy_after_blur(&s[0]));
    }
}
