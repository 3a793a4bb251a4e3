//! Independent scalar-loop oracle for the forward pass.
//!
//! Everything here is recomputed from first principles with naive index
//! loops: its own rotation blocks, its own softmax, its own norm. It
//! shares no code with the crate's forward path beyond reading weights.

use dpa_core::forward::{attention_forward, forward, rope_rotate_signed};
use dpa_core::model::{ModelConfig, ModelWeights};
use dpa_core::tensor::Tensor;
use dpa_core::zoo;

mod oracle {
    use super::*;

    fn norm_row(x: &[f64], gamma: &[f64], eps: f64) -> Vec<f64> {
        let mut ss = 0.0;
        for &v in x {
            ss += v * v;
        }
        let sigma = (ss / x.len() as f64 + eps).sqrt();
        let mut out = vec![0.0; x.len()];
        for c in 0..x.len() {
            out[c] = x[c] / sigma * gamma[c];
        }
        out
    }

    fn rotate(v: &[f64], pos: usize, base: f64) -> Vec<f64> {
        let half = v.len() / 2;
        let mut out = vec![0.0; v.len()];
        for j in 0..half {
            let theta = base.powf(-2.0 * j as f64 / v.len() as f64);
            let ang = pos as f64 * theta;
            out[2 * j] = v[2 * j] * ang.cos() - v[2 * j + 1] * ang.sin();
            out[2 * j + 1] = v[2 * j] * ang.sin() + v[2 * j + 1] * ang.cos();
        }
        out
    }

    fn silu(x: f64) -> f64 {
        x / (1.0 + (-x).exp())
    }

    /// One attention head on a normalized input, naive triple loops.
    pub fn head_output(
        x_norm: &[Vec<f64>],
        w: &ModelWeights,
        cfg: &ModelConfig,
        layer: usize,
        head: usize,
    ) -> Vec<Vec<f64>> {
        let t_len = x_norm.len();
        let d = cfg.d_model;
        let dh = cfg.head_dim;
        let lw = &w.layers[layer];
        let mut q = vec![vec![0.0; dh]; t_len];
        let mut k = vec![vec![0.0; dh]; t_len];
        let mut v = vec![vec![0.0; dh]; t_len];
        for i in 0..t_len {
            for a in 0..dh {
                for c in 0..d {
                    q[i][a] += x_norm[i][c] * lw.w_q.get2(c, head * dh + a);
                    k[i][a] += x_norm[i][c] * lw.w_k.get2(c, head * dh + a);
                    v[i][a] += x_norm[i][c] * lw.w_v.get2(c, head * dh + a);
                }
            }
            q[i] = rotate(&q[i], i, cfg.rope_base);
            k[i] = rotate(&k[i], i, cfg.rope_base);
        }
        let mut out = vec![vec![0.0; d]; t_len];
        for i in 0..t_len {
            let mut scores = vec![0.0; i + 1];
            for j in 0..=i {
                for a in 0..dh {
                    scores[j] += q[i][a] * k[j][a];
                }
                scores[j] /= (dh as f64).sqrt();
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                denom += *s;
            }
            for j in 0..=i {
                let alpha = scores[j] / denom;
                for a in 0..dh {
                    for c in 0..d {
                        out[i][c] += alpha * v[j][a] * lw.w_o.get2(head * dh + a, c);
                    }
                }
            }
        }
        out
    }

    pub fn forward_logits(
        tokens: &[usize],
        w: &ModelWeights,
        cfg: &ModelConfig,
    ) -> Vec<Vec<f64>> {
        let t_len = tokens.len();
        let d = cfg.d_model;
        let mut x: Vec<Vec<f64>> = tokens
            .iter()
            .map(|&t| (0..d).map(|c| w.embedding.get2(t, c)).collect())
            .collect();
        for l in 0..cfg.n_layers {
            let lw = &w.layers[l];
            let x_norm: Vec<Vec<f64>> = x
                .iter()
                .map(|row| norm_row(row, lw.gamma_attn.data(), cfg.norm_eps))
                .collect();
            for h in 0..cfg.n_heads {
                let write = head_output(&x_norm, w, cfg, l, h);
                for i in 0..t_len {
                    for c in 0..d {
                        x[i][c] += write[i][c];
                    }
                }
            }
            let x_norm_mid: Vec<Vec<f64>> = x
                .iter()
                .map(|row| norm_row(row, lw.gamma_mlp.data(), cfg.norm_eps))
                .collect();
            for i in 0..t_len {
                for n in 0..cfg.d_ffn {
                    let mut s = 0.0;
                    let mut u = 0.0;
                    for c in 0..d {
                        s += x_norm_mid[i][c] * lw.w_g.get2(c, n);
                        u += x_norm_mid[i][c] * lw.w_u.get2(c, n);
                    }
                    let gated = silu(s) * u;
                    for c in 0..d {
                        x[i][c] += gated * lw.w_d.get2(n, c);
                    }
                }
            }
        }
        let mut logits = vec![vec![0.0; cfg.vocab_size]; t_len];
        for i in 0..t_len {
            let final_norm = norm_row(&x[i], w.gamma_final.data(), cfg.norm_eps);
            for v in 0..cfg.vocab_size {
                for c in 0..d {
                    logits[i][v] += final_norm[c] * w.unembedding.get2(c, v);
                }
            }
        }
        logits
    }
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

#[test]
fn forward_matches_scalar_oracle_on_random_models() {
    for seed in 0..10 {
        let cfg = ModelConfig::new(3, 2, 12, 6, 8, 11, 10_000.0, 1e-5).unwrap();
        let w = zoo::build_random(&cfg, 1000 + seed).unwrap();
        let tokens: Vec<usize> = (0..6).map(|i| (seed as usize * 7 + i * 3) % 11).collect();
        let got = forward(&tokens, &w, &cfg).unwrap();
        let want = oracle::forward_logits(&tokens, &w, &cfg);
        for i in 0..tokens.len() {
            for v in 0..cfg.vocab_size {
                assert!(
                    rel_close(got.logits.get2(i, v), want[i][v], 1e-12),
                    "seed {seed} pos {i} vocab {v}: {} vs {}",
                    got.logits.get2(i, v),
                    want[i][v]
                );
            }
        }
    }
}

#[test]
fn forward_matches_oracle_on_planted_models() {
    for kind in [zoo::CircuitKind::Induction, zoo::CircuitKind::KvNeuron] {
        let cfg = zoo::default_config(kind);
        let m = zoo::build(&zoo::PlantedCircuitSpec {
            kind,
            config: cfg.clone(),
            seed: 0,
        })
        .unwrap();
        let got = forward(&m.demo_tokens, &m.weights, &cfg).unwrap();
        let want = oracle::forward_logits(&m.demo_tokens, &m.weights, &cfg);
        for i in 0..m.demo_tokens.len() {
            for v in 0..cfg.vocab_size {
                assert!(rel_close(got.logits.get2(i, v), want[i][v], 1e-12));
            }
        }
    }
}

#[test]
fn attention_head_matches_naive_loops() {
    // T=3, d=4, H=2 case against the triple-loop oracle
    let cfg = ModelConfig::new(1, 2, 4, 2, 4, 6, 10_000.0, 1e-5).unwrap();
    let w = zoo::build_random(&cfg, 77).unwrap();
    // a random already-normalized input
    let x_norm_t = {
        let raw = zoo::build_random(&cfg, 78).unwrap().embedding;
        Tensor::matrix(3, 4, raw.data()[..12].to_vec()).unwrap()
    };
    let x_norm: Vec<Vec<f64>> = (0..3).map(|i| x_norm_t.row(i).to_vec()).collect();
    for h in 0..cfg.n_heads {
        let (got, _) = attention_forward(&x_norm_t, &w.layers[0], &cfg, h).unwrap();
        let want = oracle::head_output(&x_norm, &w, &cfg, 0, h);
        for i in 0..3 {
            for c in 0..4 {
                assert!(
                    rel_close(got.get2(i, c), want[i][c], 1e-12),
                    "head {h} ({i},{c}): {} vs {}",
                    got.get2(i, c),
                    want[i][c]
                );
            }
        }
    }
}

#[test]
fn rope_relative_offset_identity_small_sample() {
    // (R(q,m))^T R(k,n) == q^T R_{theta, n-m} k
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let dh = 8;
        let q: Vec<f64> = (0..dh).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..dh).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let m = rng.gen_range(0..48i64);
        let n = rng.gen_range(0..48i64);
        let qr = rope_rotate_signed(&q, m, 10_000.0).unwrap();
        let kr = rope_rotate_signed(&k, n, 10_000.0).unwrap();
        let lhs: f64 = qr.iter().zip(&kr).map(|(a, b)| a * b).sum();
        let k_off = rope_rotate_signed(&k, n - m, 10_000.0).unwrap();
        let rhs: f64 = q.iter().zip(&k_off).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0));
    }
}
