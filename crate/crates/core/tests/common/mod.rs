//! Test-only oracles and fixtures. Nothing here calls into the code paths
//! it is used to check.

#![allow(dead_code, clippy::needless_range_loop)]

use infoprune::archive::TensorMap;
use infoprune::{Model, ModelManifest, TensorRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
}

/// Per-kernel summed Euclidean distance by direct double loop.
pub fn naive_similarity(filter: &[f32], kernel_len: usize) -> Vec<f64> {
    let n = filter.len() / kernel_len;
    let mut out = vec![0.0; n];
    for q in 0..n {
        for o in 0..n {
            if o == q {
                continue;
            }
            let mut ss = 0.0f64;
            for e in 0..kernel_len {
                let d = filter[q * kernel_len + e] as f64 - filter[o * kernel_len + e] as f64;
                ss += d * d;
            }
            out[q] += ss.sqrt();
        }
    }
    out
}

/// Textbook softmax without any overflow guard.
pub fn naive_softmax(x: &[f64]) -> Vec<f64> {
    let z: f64 = x.iter().map(|v| v.exp()).sum();
    x.iter().map(|v| v.exp() / z).collect()
}

pub fn naive_entropy_bits(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>() / std::f64::consts::LN_2
}

pub fn rel_close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-300) || a == b
}

/// Cyclic Jacobi eigenvalue iteration for a dense symmetric matrix.
pub fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i][i]).collect()
}

/// Unit-trace Gaussian Gram matrix built from scratch.
pub fn oracle_gram(maps: &[Vec<f64>], width: f64) -> Vec<Vec<f64>> {
    let s = maps.len();
    let mut k = vec![vec![0.0; s]; s];
    for i in 0..s {
        for j in 0..s {
            let d2: f64 = maps[i].iter().zip(&maps[j]).map(|(a, b)| (a - b).powi(2)).sum();
            k[i][j] = (-d2 / (2.0 * width * width)).exp() / s as f64;
        }
    }
    k
}

pub fn manifest_from(v: serde_json::Value) -> ModelManifest {
    serde_json::from_value(v).expect("fixture manifest parses")
}

/// Fills every referenced tensor with seeded uniform values (variances
/// kept positive).
pub fn with_random_tensors(manifest: ModelManifest, seed: u64) -> Model {
    let mut r = rng(seed);
    let mut t = TensorMap::new();
    for (_, name, shape) in manifest.tensor_refs() {
        let n: usize = shape.iter().product();
        let data = if name.ends_with("var") {
            (0..n).map(|_| r.gen_range(0.5f32..1.5)).collect()
        } else {
            random_vec(&mut r, n)
        };
        t.insert(name.to_string(), TensorRecord::new(name, shape, data).unwrap());
    }
    Model::new(manifest, t).expect("fixture model validates")
}
