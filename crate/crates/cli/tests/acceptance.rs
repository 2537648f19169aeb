//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p sarcse-cli --test acceptance`.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sarcse_cli::{cmd_ablate, cmd_sweep_theta, cmd_train, resolve_config, DEFAULT_THETAS};
use sarcse_core::config::RunConfig;
use sarcse_core::corpus::{FrequencyTable, SentenceBatch, Vocab, MIN_BATCH_LEN, PAD};
use sarcse_core::embedding::embed;
use sarcse_core::eval::{alignment, spearman, uniformity};
use sarcse_core::losses::{info_nce, reconstruction_loss, token_weight, LossConfig};
use sarcse_core::model::{decode, encode, forward_view, ModelDims, ModelParams, ParamVars, EMBEDDING};
use sarcse_core::objective::{batch_objective, sentence_weights, AblationMode};
use sarcse_core::tensor::{grad_check, Graph, Tensor, TensorResult, Var, DEFAULT_EPS};

type Outcome = Result<String, String>;
type Criterion = (u32, &'static str, u64, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn toy_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/toy")
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_f64(shape.to_vec(), &data).unwrap()
}

/// Reduces any node to a scalar with fixed random weights so every output
/// coordinate matters.
fn probe(g: &mut Graph<f64>, out: Var, seed: u64) -> TensorResult<Var> {
    let shape = g.shape(out).to_vec();
    let w = rand_tensor(&mut ChaCha8Rng::seed_from_u64(seed), &shape, -1.0, 1.0);
    let w = g.constant(w);
    let prod = g.mul(out, w)?;
    Ok(g.sum_all(prod))
}

type Primitive = (&'static str, Vec<Vec<usize>>, (f64, f64), fn(&mut Graph<f64>, &[Var]) -> TensorResult<Var>);

fn primitives() -> Vec<Primitive> {
    vec![
        ("add", vec![vec![2, 3], vec![2, 3]], (-1.0, 1.0), |g, v| {
            let o = g.add(v[0], v[1])?;
            probe(g, o, 1)
        }),
        ("subtract", vec![vec![2, 3], vec![2, 3]], (-1.0, 1.0), |g, v| {
            let o = g.sub(v[0], v[1])?;
            probe(g, o, 2)
        }),
        ("multiply", vec![vec![3, 2], vec![3, 2]], (-1.0, 1.0), |g, v| {
            let o = g.mul(v[0], v[1])?;
            probe(g, o, 3)
        }),
        ("scale", vec![vec![4]], (-1.0, 1.0), |g, v| {
            let o = g.scale(v[0], -2.5);
            probe(g, o, 4)
        }),
        ("matmul", vec![vec![2, 3], vec![3, 4]], (-1.0, 1.0), |g, v| {
            let o = g.matmul(v[0], v[1])?;
            probe(g, o, 5)
        }),
        ("concat", vec![vec![2, 3], vec![1, 3]], (-1.0, 1.0), |g, v| {
            let o = g.concat(&[v[0], v[1]], 0)?;
            probe(g, o, 6)
        }),
        ("reshape", vec![vec![2, 3]], (-1.0, 1.0), |g, v| {
            let o = g.reshape(v[0], &[3, 2])?;
            probe(g, o, 7)
        }),
        ("sum_all", vec![vec![2, 3]], (-1.0, 1.0), |g, v| Ok(g.sum_all(v[0]))),
        ("mean_all", vec![vec![2, 3]], (-1.0, 1.0), |g, v| Ok(g.mean_all(v[0]))),
        ("sum_axis", vec![vec![3, 4]], (-1.0, 1.0), |g, v| {
            let o = g.sum_axis(v[0], 1)?;
            probe(g, o, 8)
        }),
        ("mean_axis", vec![vec![3, 4]], (-1.0, 1.0), |g, v| {
            let o = g.mean_axis(v[0], 0)?;
            probe(g, o, 9)
        }),
        ("exp", vec![vec![5]], (-1.0, 1.0), |g, v| {
            let o = g.exp(v[0]);
            probe(g, o, 10)
        }),
        ("ln", vec![vec![5]], (0.5, 2.0), |g, v| {
            let o = g.ln(v[0])?;
            probe(g, o, 11)
        }),
        ("max_const", vec![vec![6]], (0.2, 1.0), |g, v| {
            let shifted = g.scale(v[0], 1.0);
            let o = g.max_const(shifted, 0.6);
            probe(g, o, 12)
        }),
        ("l2_norm", vec![vec![3, 4]], (-1.0, 1.0), |g, v| {
            let o = g.l2_norm(v[0])?;
            probe(g, o, 13)
        }),
        ("cosine_similarity", vec![vec![3, 5], vec![4, 5]], (-1.0, 1.0), |g, v| {
            let o = g.cosine_similarity(v[0], v[1])?;
            probe(g, o, 14)
        }),
        ("softmax", vec![vec![3, 4]], (-2.0, 2.0), |g, v| {
            let o = g.softmax(v[0], 1)?;
            probe(g, o, 15)
        }),
        ("log_softmax", vec![vec![3, 4]], (-2.0, 2.0), |g, v| {
            let o = g.log_softmax(v[0], 0)?;
            probe(g, o, 16)
        }),
        ("select", vec![vec![3, 2, 2]], (-1.0, 1.0), |g, v| {
            let o = g.select(v[0], 1)?;
            probe(g, o, 17)
        }),
        ("slice_rows", vec![vec![5, 3]], (-1.0, 1.0), |g, v| {
            let o = g.slice_rows(v[0], 1, 3)?;
            probe(g, o, 18)
        }),
        ("gather_rows", vec![vec![4, 3]], (-1.0, 1.0), |g, v| {
            let o = g.gather_rows(v[0], &[1, 3, 1, 2], Some(0))?;
            probe(g, o, 19)
        }),
        ("conv1d", vec![vec![7, 3], vec![4, 3, 3], vec![4]], (-1.0, 1.0), |g, v| {
            let o = g.conv1d_valid(v[0], v[1], v[2])?;
            probe(g, o, 20)
        }),
        ("transposed_conv1d", vec![vec![5, 4], vec![4, 3, 3], vec![3]], (-1.0, 1.0), |g, v| {
            let o = g.transposed_conv1d(v[0], v[1], v[2])?;
            probe(g, o, 21)
        }),
        ("conv2d", vec![vec![3, 6], vec![2, 3, 2], vec![2]], (-1.0, 1.0), |g, v| {
            let o = g.conv2d_valid(v[0], v[1], v[2])?;
            probe(g, o, 22)
        }),
        ("transposed_conv2d", vec![vec![2, 1, 5], vec![2, 3, 2], vec![1]], (-1.0, 1.0), |g, v| {
            let o = g.transposed_conv2d(v[0], v[1], v[2])?;
            probe(g, o, 23)
        }),
        ("max_pool_time", vec![vec![6, 3]], (-1.0, 1.0), |g, v| {
            let (o, _) = g.max_pool_time(v[0], 4)?;
            probe(g, o, 24)
        }),
        ("max_unpool_time", vec![vec![3]], (-1.0, 1.0), |g, v| {
            let o = g.max_unpool_time(v[0], &[2, 0, 4], 5)?;
            probe(g, o, 25)
        }),
        ("dropout", vec![vec![4, 4]], (-1.0, 1.0), |g, v| {
            let o = g.dropout(v[0], 0.3, &mut ChaCha8Rng::seed_from_u64(26))?;
            probe(g, o, 26)
        }),
    ]
}

fn grad_setup() -> (Vocab, FrequencyTable, ModelParams, SentenceBatch) {
    let text = [
        "the old man is playing a guitar",
        "a young girl reads the book slowly",
        "two dogs run across the green park",
    ];
    let vocab = Vocab::from_sentences(text, 1).unwrap();
    let freq = FrequencyTable::from_sentences(text, &vocab);
    let dims = ModelDims {
        vocab_size: vocab.len(),
        dim: 4,
        co_t: 6,
        co_c: 2,
    };
    let params = ModelParams::init(dims, &vocab, 0.5, &mut ChaCha8Rng::seed_from_u64(3), None).unwrap();
    // six tokens per sentence
    let seqs: Vec<Vec<usize>> = text
        .iter()
        .map(|s| vocab.encode(&sarcse_core::corpus::tokenize(s))[..6].to_vec())
        .collect();
    let batch = SentenceBatch::from_ids(&seqs, MIN_BATCH_LEN).unwrap();
    (vocab, freq, params, batch)
}

fn objective_grad_error(cfg: LossConfig, mode: AblationMode) -> TensorResult<f64> {
    let (_, freq, params, batch) = grad_setup();
    let names: Vec<String> = params.names().cloned().collect();
    let point: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.cast::<f64>()).collect();
    grad_check(
        |g, vars| {
            let p = ParamVars::from_pairs(names.iter().cloned().zip(vars.iter().copied()));
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let terms = batch_objective(g, &batch, &p, &freq, &cfg, mode, 0.1, &mut rng)
                .map_err(|e| sarcse_core::tensor::TensorError::Domain { op: leak(e.to_string()) })?;
            Ok(terms.total)
        },
        &point,
        DEFAULT_EPS,
    )
}

fn leak(s: String) -> &'static str {
    Box::leak(s.into_boxed_str())
}

fn gradient_fidelity() -> Outcome {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let prims = primitives();
    for (name, shapes, (lo, hi), f) in &prims {
        let point: Vec<Tensor<f64>> = shapes.iter().map(|s| rand_tensor(&mut rng, s, *lo, *hi)).collect();
        let err = grad_check(f, &point, DEFAULT_EPS).map_err(|e| format!("{name}: {e}"))?;
        ensure!(err < 1e-4, "{name}: relative error {err:.3e}");
        worst = worst.max(err);
    }
    let defaults = objective_grad_error(LossConfig::default(), AblationMode::Full).map_err(|e| e.to_string())?;
    ensure!(defaults < 1e-4, "objective (default weights): relative error {defaults:.3e}");
    let heavy = LossConfig {
        beta: 0.5,
        gamma: 0.5,
        ..LossConfig::default()
    };
    let heavy_err = objective_grad_error(heavy, AblationMode::Full).map_err(|e| e.to_string())?;
    ensure!(heavy_err < 1e-4, "objective (heavy reconstruction): relative error {heavy_err:.3e}");
    Ok(format!(
        "{} primitives worst {worst:.2e}; objective {defaults:.2e} / {heavy_err:.2e}",
        prims.len()
    ))
}

fn shape_law() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let vocab = Vocab::from_sentences(["alpha beta gamma delta epsilon zeta"], 1).unwrap();
    let mut cases = 0;
    for _ in 0..40 {
        let co_t = rng.gen_range(2..40);
        let co_c = rng.gen_range(1..6);
        let d = rng.gen_range(1..6);
        cases += 1;
        let len = encoded_len(&vocab, d, co_t, co_c, rng.gen_range(1..9))?;
        ensure!(len == co_c * (co_t - 1), "co_t={co_t} co_c={co_c}: |z|={len}");
    }
    let full = encoded_len(&vocab, 4, 500, 3, 7)?;
    ensure!(full == 1497, "co_t=500, co_c=3 gave |z|={full}");
    Ok(format!("{cases} fuzzed dims; co_t=500, co_c=3 gives {full}"))
}

fn encoded_len(vocab: &Vocab, d: usize, co_t: usize, co_c: usize, tokens: usize) -> Result<usize, String> {
    let dims = ModelDims {
        vocab_size: vocab.len(),
        dim: d,
        co_t,
        co_c,
    };
    let params = ModelParams::init(dims, vocab, 0.3, &mut ChaCha8Rng::seed_from_u64(co_t as u64), None)
        .map_err(|e| e.to_string())?;
    let ids: Vec<usize> = (0..tokens).map(|i| 2 + i % (vocab.len() - 2)).collect();
    let batch = SentenceBatch::from_ids(&[ids], MIN_BATCH_LEN).map_err(|e| e.to_string())?;
    let z = sarcse_core::model::embed_sentences(&params, &batch).map_err(|e| e.to_string())?;
    Ok(z[0].len())
}

fn weight_table() -> Outcome {
    let cases = [(0.0, 1.0), (0.004, 0.8), (0.018, 0.1), (0.5, 0.1)];
    for (freq, want) in cases {
        let got = token_weight(freq, 0.1, 50.0);
        ensure!((got - want).abs() < 1e-12, "freq {freq}: {got} != {want}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(300);
    let mut freqs: Vec<f64> = (0..10_000).map(|_| rng.gen_range(0.0..=1.0)).collect();
    freqs.sort_by(f64::total_cmp);
    let mut prev = f64::INFINITY;
    for f in freqs {
        let w = token_weight(f, 0.1, 50.0);
        ensure!((0.1..=1.0).contains(&w), "weight {w} out of bounds at freq {f}");
        ensure!(w <= prev, "not monotone at freq {f}");
        prev = w;
    }
    Ok("table exact; 10^4 random freqs bounded and monotone".into())
}

fn info_nce_value(z: &Tensor<f64>, zp: &Tensor<f64>, tau: f64) -> f64 {
    let mut g = Graph::new();
    let a = g.constant(z.clone());
    let b = g.constant(zp.clone());
    let l = info_nce(&mut g, a, b, tau).unwrap();
    g.value(l).data()[0]
}

fn cos_matrix(z: &Tensor<f64>, zp: &Tensor<f64>) -> Vec<f64> {
    let (b, w) = (z.shape()[0], z.shape()[1]);
    let row = |t: &Tensor<f64>, i: usize| t.data()[i * w..(i + 1) * w].to_vec();
    let mut out = Vec::new();
    for i in 0..b {
        for j in 0..b {
            let (x, y) = (row(z, i), row(zp, j));
            let dot: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
            let nx = x.iter().map(|a| a * a).sum::<f64>().sqrt();
            let ny = y.iter().map(|a| a * a).sum::<f64>().sqrt();
            out.push(dot / (nx * ny));
        }
    }
    out
}

fn info_nce_cases() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(400);
    let z = rand_tensor(&mut rng, &[1, 7], -1.0, 1.0);
    let zp = rand_tensor(&mut rng, &[1, 7], -1.0, 1.0);
    let single = info_nce_value(&z, &zp, 0.05);
    ensure!(single == 0.0, "B=1 gave {single}");
    let z = Tensor::from_f64(vec![2, 2], &[1.0, 0.0, 1.0, 0.0]).unwrap();
    let zp = Tensor::from_f64(vec![2, 2], &[0.0, 1.0, 0.0, 3.0]).unwrap();
    let two = info_nce_value(&z, &zp, 0.05);
    ensure!((two - std::f64::consts::LN_2).abs() < 1e-10, "equal cosines gave {two}");

    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let b = rng.gen_range(1..9);
        let w = rng.gen_range(2..9);
        let tau = rng.gen_range(0.05..1.0);
        let z = rand_tensor(&mut rng, &[b, w], -1.0, 1.0);
        let zp = rand_tensor(&mut rng, &[b, w], -1.0, 1.0);
        let l = info_nce_value(&z, &zp, tau);
        ensure!(l >= 0.0, "negative loss {l}");
        let cos = cos_matrix(&z, &zp);
        let spread = cos.iter().cloned().fold(f64::MIN, f64::max) - cos.iter().cloned().fold(f64::MAX, f64::min);
        ensure!(l <= (b as f64).ln() + spread / tau + 1e-12, "upper bound violated");
        let c = rng.gen_range(0.01..100.0);
        let scale = |t: &Tensor<f64>| Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * c).collect()).unwrap();
        let scaled = info_nce_value(&scale(&z), &scale(&zp), tau);
        worst = worst.max((scaled - l).abs());
        ensure!((scaled - l).abs() < 1e-9, "rescaling by {c} moved loss by {:.3e}", (scaled - l).abs());
    }
    Ok(format!("B=1 exact, B=2 ln 2; 10^3 batches, worst rescale drift {worst:.1e}"))
}

fn adjoint_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let ks = rng.gen_range(1..6);
        let d = rng.gen_range(1..6);
        let c = rng.gen_range(1..6);
        let n = ks + rng.gen_range(0..8);
        let u = rand_tensor(&mut rng, &[n, d], -1.0, 1.0);
        let k = rand_tensor(&mut rng, &[c, ks, d], -1.0, 1.0);
        let v = rand_tensor(&mut rng, &[n - ks + 1, c], -1.0, 1.0);
        let mut g = Graph::<f64>::new();
        let (uv, kv, vv) = (g.constant(u.clone()), g.constant(k), g.constant(v.clone()));
        let zero_c = g.constant(Tensor::zeros(vec![c]));
        let zero_d = g.constant(Tensor::zeros(vec![d]));
        let fwd = g.conv1d_valid(uv, kv, zero_c).map_err(|e| e.to_string())?;
        let back = g.transposed_conv1d(vv, kv, zero_d).map_err(|e| e.to_string())?;
        let lhs: f64 = g.value(fwd).data().iter().zip(v.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = u.data().iter().zip(g.value(back).data()).map(|(a, b)| a * b).sum();
        let err = (lhs - rhs).abs();
        worst = worst.max(err);
        ensure!(err < 1e-10, "<conv u, v> = {lhs} but <u, conv^T v> = {rhs}");
    }
    Ok(format!("10^3 random cases, worst gap {worst:.1e}"))
}

fn brute_spearman(x: &[f64], y: &[f64]) -> f64 {
    let ranks = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|a| {
                let below = v.iter().filter(|b| *b < a).count() as f64;
                let ties = v.iter().filter(|b| *b == a).count() as f64;
                below + (ties + 1.0) / 2.0
            })
            .collect()
    };
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    cov / (vx * vy).sqrt()
}

fn spearman_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(600);
    let mut worst = 0.0f64;
    let mut checked = 0;
    while checked < 1000 {
        let n = rng.gen_range(2..=50);
        let levels = rng.gen_range(2..12);
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64 * 0.5).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0f64).round()).collect();
        let Ok(got) = spearman(&x, &y) else {
            let constant = |v: &[f64]| v.iter().all(|a| *a == v[0]);
            ensure!(constant(&x) || constant(&y), "spurious undefined result");
            continue;
        };
        let want = brute_spearman(&x, &y);
        worst = worst.max((got - want).abs());
        ensure!((got - want).abs() < 1e-12, "n={n}: {got} vs oracle {want}");
        let warped: Vec<f64> = x.iter().map(|v| v.powi(3) + (v * 0.3).exp()).collect();
        let again = spearman(&warped, &y).map_err(|e| e.to_string())?;
        ensure!((again - got).abs() < 1e-12, "monotone transform changed rho");
        checked += 1;
    }
    Ok(format!("10^3 tied vectors, worst oracle gap {worst:.1e}"))
}

fn random_rotation(rng: &mut ChaCha8Rng, d: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

fn rotate(q: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    q.iter().map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

fn alignment_uniformity() -> Outcome {
    let e = vec![0.3, -0.4, 1.2];
    let al = alignment(&[(e.clone(), e.clone()), (e.clone(), e.clone())]).map_err(|x| x.to_string())?;
    let un = uniformity(&[e.clone(), e.clone(), e]).map_err(|x| x.to_string())?;
    ensure!(al == 0.0 && un == 0.0, "identical embeddings gave ({al}, {un})");
    let anti = uniformity(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).map_err(|x| x.to_string())?;
    ensure!((anti + 8.0).abs() < 1e-10, "antipodal uniformity {anti}");

    let mut rng = ChaCha8Rng::seed_from_u64(700);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let d = 8;
        let q = random_rotation(&mut rng, d);
        let pts: Vec<Vec<f64>> = (0..12).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let pairs: Vec<(Vec<f64>, Vec<f64>)> = pts.chunks(2).map(|c| (c[0].clone(), c[1].clone())).collect();
        let rp: Vec<Vec<f64>> = pts.iter().map(|p| rotate(&q, p)).collect();
        let rpairs: Vec<(Vec<f64>, Vec<f64>)> = rp.chunks(2).map(|c| (c[0].clone(), c[1].clone())).collect();
        let da = (alignment(&pairs).unwrap() - alignment(&rpairs).unwrap()).abs();
        let du = (uniformity(&pts).unwrap() - uniformity(&rp).unwrap()).abs();
        worst = worst.max(da).max(du);
        ensure!(da < 1e-8 && du < 1e-8, "rotation moved metrics by ({da:.2e}, {du:.2e})");
    }
    Ok(format!("analytic cases exact; 20 random rotations, worst drift {worst:.1e}"))
}

fn mask_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(800);
    let words: Vec<String> = (0..30).map(|i| format!("w{i}")).collect();
    let vocab = Vocab::from_tokens(words.iter().map(String::as_str));
    let freq = FrequencyTable::from_counts((0..vocab.len() as u64).map(|i| 1 + i % 7).collect());
    let dims = ModelDims {
        vocab_size: vocab.len(),
        dim: 4,
        co_t: 8,
        co_c: 2,
    };
    let params = ModelParams::init(dims, &vocab, 0.5, &mut ChaCha8Rng::seed_from_u64(8), None).unwrap();
    let cfg = LossConfig::default();
    let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<u64>>();

    for case in 0..100 {
        let len = rng.gen_range(1..12);
        let extra = rng.gen_range(1..7);
        let ids: Vec<usize> = (0..len).map(|_| rng.gen_range(2..vocab.len())).collect();

        // batch path: the same sentence with a wider padded batch
        let mut views = Vec::new();
        for width in [MIN_BATCH_LEN, len.max(MIN_BATCH_LEN) + extra] {
            let batch = SentenceBatch::from_ids(std::slice::from_ref(&ids), width).unwrap();
            let mut g = Graph::<f64>::new();
            let p = params.register(&mut g, |_| false);
            let table = p.get(EMBEDDING).unwrap();
            let mut no_rng = ChaCha8Rng::seed_from_u64(0);
            let cube = embed(&mut g, &batch, table, 0.0, &mut no_rng).unwrap();
            let (z, sv) = forward_view(&mut g, &batch, cube, &p, true).unwrap();
            let (w, m) = sentence_weights(&batch, 0, &freq, &cfg, AblationMode::Full);
            let l = reconstruction_loss(&mut g, sv[0].x, sv[0].reconstruction.unwrap(), &w, &m, false).unwrap();
            views.push((bits(g.value(z)), g.value(l).data()[0].to_bits()));
        }
        ensure!(views[0] == views[1], "case {case}: batch padding changed Z or L_R");

        // encoder path: explicit PAD rows handed to the encoder
        let mut direct = Vec::new();
        for pad in [0, extra] {
            let rows = len.max(MIN_BATCH_LEN) + pad;
            let mut padded = ids.clone();
            padded.resize(rows, PAD);
            let mut g = Graph::<f64>::new();
            let p = params.register(&mut g, |_| false);
            let table = p.get(EMBEDDING).unwrap();
            let x = g.gather_rows(table, &padded, Some(PAD)).unwrap();
            let (z, state) = encode(&mut g, x, len, &p).unwrap();
            let rec = decode(&mut g, z, &state, &p).unwrap();
            let mask: Vec<bool> = (0..rows).map(|r| r < len).collect();
            let w: Vec<f64> = padded
                .iter()
                .zip(&mask)
                .map(|(&id, &m)| if m { token_weight(freq.freq(id), cfg.theta, cfg.lambda) } else { 0.0 })
                .collect();
            let l = reconstruction_loss(&mut g, x, rec, &w, &mask, false).unwrap();
            direct.push((bits(g.value(z)), g.value(l).data()[0].to_bits()));
        }
        ensure!(direct[0] == direct[1], "case {case}: PAD rows changed Z or L_R");
        ensure!(direct[0] == views[0], "case {case}: batch and encoder paths disagree");
    }
    Ok("100 random sentences bitwise identical at f64".into())
}

fn toy_config() -> RunConfig {
    resolve_config(Some(&toy_dir().join("toy.conf")), &[], None).unwrap()
}

fn determinism_and_smoke() -> (Outcome, Outcome) {
    let dir = tempfile::tempdir().unwrap();
    let toy = toy_dir();
    let cfg = toy_config();
    let run = |name: &str| {
        let out = dir.path().join(name);
        cmd_train(&cfg, &toy.join("corpus.txt"), &toy.join("dev.tsv"), &out, None).map(|o| (o, out))
    };
    let (first, a) = match run("a") {
        Ok(r) => r,
        Err(e) => return (Err(e.to_string()), Err("training failed".into())),
    };
    let second = run("b");
    let determinism = (|| {
        let (_, b) = second.map_err(|e| e.to_string())?;
        for f in ["final.ckpt", "best.ckpt", "train_log.csv"] {
            let (x, y) = (fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
            ensure!(x == y, "{f} differs between runs");
        }
        Ok(format!("{} steps, checkpoints and logs bitwise identical", first.log.len()))
    })();

    let smoke = (|| {
        let text = fs::read_to_string(toy.join("smoke_margin.txt")).map_err(|e| e.to_string())?;
        let margin: f64 = text
            .lines()
            .find_map(|l| l.strip_prefix("min_relative_reduction = "))
            .ok_or("no margin line")?
            .trim()
            .parse()
            .map_err(|_| "bad margin")?;
        ensure!(first.log.len() == 200, "expected 200 steps, got {}", first.log.len());
        let start = first.log[0].losses.total;
        let end = first.log[199].losses.total;
        let reduction = 1.0 - end / start;
        ensure!(
            reduction >= margin,
            "loss {start:.6} -> {end:.6} is a {:.1}% reduction, below the {:.1}% margin",
            reduction * 100.0,
            margin * 100.0
        );
        Ok(format!(
            "loss {start:.6} -> {end:.6} ({:.2}% lower, margin {:.0}%)",
            reduction * 100.0,
            margin * 100.0
        ))
    })();
    (determinism, smoke)
}

fn ablation_harness() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let toy = toy_dir();
    let rows = cmd_ablate(
        &toy_config(),
        &toy.join("corpus.txt"),
        &toy.join("dev.tsv"),
        &toy.join("test.tsv"),
        dir.path(),
    )
    .map_err(|e| e.to_string())?;
    let labels: Vec<&str> = rows.iter().map(|r| r.label.as_str()).collect();
    ensure!(labels == ["full", "no_sal", "no_sal_no_decoder"], "rows {labels:?}");
    ensure!(rows.iter().all(|r| r.seed == rows[0].seed), "seeds differ");
    let table = fs::read_to_string(dir.path().join("ablation.csv")).map_err(|e| e.to_string())?;
    ensure!(table.lines().count() == 4, "ablation.csv should have a header and three rows");
    let log = fs::read_to_string(dir.path().join("no_sal_no_decoder/train_log.csv")).map_err(|e| e.to_string())?;
    for line in log.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        ensure!(
            f[2].parse::<f64>() == Ok(0.0) && f[3].parse::<f64>() == Ok(0.0),
            "nonzero reconstruction in no-decoder log: {line}"
        );
    }
    ensure!(rows[2].final_recon == 0.0 && rows[2].final_recon_pos == 0.0, "third row reconstruction nonzero");
    let fmt = |v: Option<f64>| v.map_or("undefined".to_string(), |r| format!("{r:.4}"));
    let trend: Vec<String> = rows.iter().map(|r| format!("{}={}", r.label, fmt(r.test_spearman))).collect();
    Ok(format!("seed {}; test spearman (informative) {}", rows[0].seed, trend.join(", ")))
}

fn theta_sweep() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let toy = toy_dir();
    let rows = cmd_sweep_theta(
        &toy_config(),
        &DEFAULT_THETAS,
        &toy.join("corpus.txt"),
        &toy.join("dev.tsv"),
        &toy.join("test.tsv"),
        dir.path(),
    )
    .map_err(|e| e.to_string())?;
    ensure!(rows.len() == 7, "{} rows", rows.len());
    let labels: Vec<&str> = rows.iter().map(|r| r.label.as_str()).collect();
    ensure!(labels == ["0", "0.1", "0.2", "0.3", "0.4", "0.5", "0.6"], "labels {labels:?}");
    ensure!(rows.iter().all(|r| r.seed == rows[0].seed), "seeds differ");
    let table = fs::read_to_string(dir.path().join("theta_sweep.csv")).map_err(|e| e.to_string())?;
    ensure!(table.lines().count() == 8, "theta_sweep.csv should have a header and seven rows");
    Ok("7 rows for theta 0..0.6, shared seed".into())
}

struct Report {
    failures: usize,
}

impl Report {
    fn line(&mut self, id: u32, name: &str, limit: Duration, elapsed: Duration, outcome: Outcome) {
        let outcome = outcome.and_then(|detail| {
            if elapsed > limit {
                Err(format!("took {:.1}s, limit {}s ({detail})", elapsed.as_secs_f64(), limit.as_secs()))
            } else {
                Ok(detail)
            }
        });
        let secs = elapsed.as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  [{id:>2}] {name} ({secs:.1}s): {detail}"),
            Err(reason) => {
                self.failures += 1;
                println!("FAIL  [{id:>2}] {name} ({secs:.1}s): {reason}");
            }
        }
    }
}

fn guarded(f: impl FnOnce() -> Outcome) -> (Outcome, Duration) {
    let t = Instant::now();
    let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    });
    (r, t.elapsed())
}

fn main() -> ExitCode {
    let mut report = Report { failures: 0 };
    let secs = Duration::from_secs;
    let quick: [Criterion; 8] = [
        (1, "gradient fidelity", 60, gradient_fidelity),
        (2, "embedding length law", 5, shape_law),
        (3, "token weight table", 1, weight_table),
        (4, "InfoNCE analytic cases", 10, info_nce_cases),
        (5, "conv1d adjoint identity", 10, adjoint_identity),
        (6, "Spearman oracle equivalence", 10, spearman_oracle),
        (7, "alignment and uniformity", 5, alignment_uniformity),
        (8, "padding invariance", 10, mask_invariance),
    ];
    for (id, name, limit, f) in quick {
        let (r, t) = guarded(f);
        report.line(id, name, secs(limit), t, r);
    }

    let t = Instant::now();
    let (det, smoke) = match catch_unwind(determinism_and_smoke) {
        Ok(pair) => pair,
        Err(_) => (Err("panicked".into()), Err("panicked".into())),
    };
    let elapsed = t.elapsed();
    report.line(9, "training determinism", secs(300), elapsed, det);
    report.line(10, "smoke convergence", secs(180), elapsed / 2, smoke);

    let (r, t) = guarded(ablation_harness);
    report.line(11, "ablation harness", secs(600), t, r);
    let (r, t) = guarded(theta_sweep);
    report.line(12, "theta sweep harness", secs(1200), t, r);

    println!("{} of 12 criteria passed", 12 - report.failures);
    if report.failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
