// SPDX-License-Identifier: MIT OR Apache-2.0

//! End-to-end acceptance checks. Runs without the libtest harness so that
//! every check prints exactly one PASS/FAIL line, in order, even when the
//! output is not captured.

// The reference implementations index like the formulas they transcribe.
#![allow(clippy::needless_range_loop)]

use std::time::{Duration, Instant};

use olakit::linalg::Matrix;
use olakit::norm::{contribution_terms, rms, Architecture, LayerDecompInputs};
use olakit::ola::{binomial, ola_orders, reconstruct_rollout, rollout, LayerAttention, Order};
use olakit::preprocess::{trace_stack, PreprocessConfig};
use olakit::probe::{
    align_example, eval_probe, loss, loss_and_grad, train_probe, transfer_eval, Arc, LabelSet, ProbeParams, Targets,
    Task, TrainConfig,
};
use olakit::similarity::retrieve;
use olakit::ssim::{ssim, SsimConfig};
use olakit::synth::{synth_corpus, synth_tag_labels, Coupling, SynthConfig, TagSignal};
use olakit::{LabeledExample, OlaStack};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn within_budget(elapsed: Duration, budget_secs: u64) -> bool {
    elapsed <= Duration::from_secs(budget_secs)
}

fn random_stochastic(rng: &mut ChaCha8Rng, l: usize, causal: bool) -> Matrix<f64> {
    let mut m = Matrix::from_fn(l, l, |r, c| {
        if causal && c > r {
            0.0
        } else {
            rng.random_range(0.01..1.0)
        }
    });
    for r in 0..l {
        let s: f64 = m.row(r).iter().sum();
        m.row_mut(r).iter_mut().for_each(|v| *v /= s);
    }
    m
}

fn random_layers(rng: &mut ChaCha8Rng, n: usize, l: usize) -> LayerAttention<f64> {
    let causal = rng.random_bool(0.5);
    let matrices = (0..n).map(|_| random_stochastic(rng, l, causal)).collect();
    LayerAttention::new(matrices, causal).unwrap()
}

/// Dense product on nested vectors, kept separate from the library kernel.
fn naive_mul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (n, m, p) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; p]; n];
    for i in 0..n {
        for j in 0..p {
            let mut s = 0.0;
            for k in 0..m {
                s += a[i][k] * b[k][j];
            }
            out[i][j] = s;
        }
    }
    out
}

fn nested(m: &Matrix<f64>) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn rel_frobenius(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
    a.sub(b).unwrap().frobenius_norm() / b.frobenius_norm()
}

// ---------------------------------------------------------------------------

fn decomposition_identity() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(1..=8);
        let l = rng.random_range(2..=16);
        let layers = random_layers(&mut rng, n, l);
        let orders = ola_orders(&layers, n).unwrap();
        let rebuilt = reconstruct_rollout(&orders, n).unwrap();
        worst = worst.max(rel_frobenius(&rebuilt, &rollout(&layers)));
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= 1e-9 && within_budget(elapsed, 10),
        format!("max relative Frobenius error {worst:.2e} (tol 1e-9), {elapsed:.2?} (budget 10 s)"),
    )
}

fn recurrence_matches_enumeration() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    for n in 1..=8usize {
        for _ in 0..3 {
            let l = rng.random_range(2..=10);
            let layers = random_layers(&mut rng, n, l);
            let recurrence = ola_orders(&layers, n).unwrap();
            let mats: Vec<Vec<Vec<f64>>> = layers.matrices.iter().map(nested).collect();
            for (k, rec) in recurrence.iter().enumerate() {
                let mut sum = vec![vec![0.0; l]; l];
                let mut count = 0u64;
                for mask in 0u32..(1 << n) {
                    if mask.count_ones() as usize != k {
                        continue;
                    }
                    count += 1;
                    let mut prod: Vec<Vec<f64>> =
                        (0..l).map(|r| (0..l).map(|c| f64::from(u8::from(r == c))).collect()).collect();
                    for (i, m) in mats.iter().enumerate() {
                        if mask & (1 << i) != 0 {
                            prod = naive_mul(m, &prod);
                        }
                    }
                    for r in 0..l {
                        for c in 0..l {
                            sum[r][c] += prod[r][c];
                        }
                    }
                }
                for r in 0..l {
                    for c in 0..l {
                        worst = worst.max((sum[r][c] / count as f64 - rec[(r, c)]).abs());
                    }
                }
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= 1e-10 && within_budget(elapsed, 30),
        format!("max abs difference {worst:.2e} over k <= N <= 8 (tol 1e-10), {elapsed:.2?} (budget 30 s)"),
    )
}

fn first_order_closed_form() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(1..=12);
        let l = rng.random_range(2..=16);
        let layers = random_layers(&mut rng, n, l);
        let first = &ola_orders(&layers, 1).unwrap()[1];
        for r in 0..l {
            for c in 0..l {
                let mean = layers.matrices.iter().map(|m| m[(r, c)]).sum::<f64>() / n as f64;
                worst = worst.max((first[(r, c)] - mean).abs());
            }
        }
    }
    let tol = 4.0 * f64::EPSILON;
    outcome(worst <= tol, format!("max abs difference {worst:.2e} (tol {tol:.2e})"))
}

/// Standard attention block forward pass: normalize, project values per
/// head, mix by attention, project out, (Gemma) post-norm, add residual.
fn attention_forward(x: &LayerDecompInputs<f64>) -> Vec<Vec<f64>> {
    let (l, d) = x.features.shape();
    let gain = |g: f64| match x.architecture {
        Architecture::LlamaQwen => g,
        Architecture::Gemma => 1.0 + g,
    };
    let normed: Vec<Vec<f64>> = (0..l)
        .map(|j| {
            let row = x.features.row(j);
            let r = (row.iter().map(|v| v * v).sum::<f64>() / d as f64).sqrt();
            row.iter().zip(&x.gamma).map(|(v, &g)| gain(g) * v / r).collect()
        })
        .collect();
    let mut out = vec![vec![0.0; d]; l];
    for h in 0..x.attention.len() {
        let values = naive_mul(&normed, &nested(&x.wv[h]));
        let mixed = naive_mul(&nested(&x.attention[h]), &values);
        let projected = naive_mul(&mixed, &nested(&x.wo[h]));
        for i in 0..l {
            for c in 0..d {
                out[i][c] += projected[i][c];
            }
        }
    }
    if let Some(g2) = &x.gamma2 {
        for row in out.iter_mut() {
            let r = rms(row);
            for (v, &g) in row.iter_mut().zip(g2) {
                *v = (1.0 + g) * *v / r;
            }
        }
    }
    for i in 0..l {
        for c in 0..d {
            out[i][c] += x.features[(i, c)];
        }
    }
    out
}

fn random_block(rng: &mut ChaCha8Rng, architecture: Architecture) -> LayerDecompInputs<f64> {
    let (l, d, h) = (rng.random_range(2..=10), rng.random_range(2..=12), rng.random_range(1..=4));
    let e = rng.random_range(1..=6);
    let causal = rng.random_bool(0.5);
    let normal = |rng: &mut ChaCha8Rng, rows: usize, cols: usize| {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    };
    let features = normal(rng, l, d);
    let wv = (0..h).map(|_| normal(rng, d, e)).collect();
    let wo = (0..h).map(|_| normal(rng, e, d)).collect();
    let gamma = (0..d).map(|_| rng.random_range(-0.5..1.5)).collect();
    let gamma2 = (architecture == Architecture::Gemma).then(|| (0..d).map(|_| rng.random_range(-0.5..1.5)).collect());
    LayerDecompInputs {
        attention: (0..h).map(|_| random_stochastic(rng, l, causal)).collect(),
        features,
        wv,
        wo,
        gamma,
        gamma2,
        architecture,
    }
}

fn norm_reconstruction() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst = 0.0f64;
    for architecture in [Architecture::LlamaQwen, Architecture::Gemma] {
        for _ in 0..50 {
            let block = random_block(&mut rng, architecture);
            let terms = contribution_terms(&block).unwrap();
            let forward = attention_forward(&block);
            for (i, row_terms) in terms.iter().enumerate() {
                let mut sum = vec![0.0; forward[i].len()];
                for t in row_terms {
                    for (s, v) in sum.iter_mut().zip(t) {
                        *s += v;
                    }
                }
                let diff: f64 = sum.iter().zip(&forward[i]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                let norm: f64 = forward[i].iter().map(|v| v * v).sum::<f64>().sqrt();
                worst = worst.max(diff / norm.max(f64::MIN_POSITIVE));
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= 1e-8 && within_budget(elapsed, 10),
        format!("max relative error {worst:.2e} over 50 blocks per architecture (tol 1e-8), {elapsed:.2?} (budget 10 s)"),
    )
}

fn random_stack(rng: &mut ChaCha8Rng, size: usize, channels: usize) -> OlaStack {
    OlaStack {
        channels: (0..channels)
            .map(|_| Matrix::from_fn(size, size, |_, _| rng.random_range(0.0..1.0)))
            .collect(),
        channel_orders: (1..=channels).map(Order::Level).collect(),
        model_id: "m".into(),
        text_id: "t".into(),
        causal: false,
        source_len: size,
    }
}

fn random_targets(rng: &mut ChaCha8Rng, task: Task, size: usize, n_labels: usize) -> Targets {
    match task {
        Task::Pos | Task::Ner => Targets::Tags(
            (0..size)
                .filter_map(|p| rng.random_bool(0.7).then(|| (p, rng.random_range(0..n_labels))))
                .collect(),
        ),
        Task::Re => {
            let a = rng.random_range(0..size - 2);
            let b = rng.random_range(a + 2..size);
            Targets::Relation {
                e1: (a..=a + 1).collect(),
                e2: vec![b],
                relation: rng.random_range(0..n_labels),
            }
        }
        Task::Dp => {
            let candidates: Vec<usize> = (0..size).filter(|p| p % 2 == 0 || *p == 1).collect();
            let arcs = candidates
                .iter()
                .map(|&d| Arc {
                    dependent: d,
                    head: candidates[rng.random_range(0..candidates.len())],
                    label: rng.random_range(0..n_labels),
                })
                .collect();
            Targets::Arcs { arcs, candidates }
        }
    }
}

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let step = 1e-5;
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    for task in [Task::Re, Task::Ner, Task::Dp, Task::Pos] {
        for trial in 0..2 {
            let (size, channels, hidden, n_labels) = (6, 2, 4, 3);
            let labels = LabelSet::from_names((0..n_labels).map(|i| format!("L{i}")));
            let orders = (1..=channels).map(Order::Level).collect();
            let mut params = ProbeParams::<f64>::init(task, labels, orders, size, hidden, 900 + trial).unwrap();
            // Non-zero biases so every block carries a gradient signal.
            params.proj_b.iter_mut().for_each(|b| *b = rng.random_range(-0.3..0.3));
            let stack = random_stack(&mut rng, size, channels);
            let targets = random_targets(&mut rng, task, size, n_labels);
            let mut grad = params.zeros_like();
            loss_and_grad(&params, &stack, &targets, &mut grad).unwrap();

            let mut blocks: Vec<(String, usize, usize)> = Vec::new();
            let mut offset = 0;
            params.visit(|name, b| {
                blocks.push((name.to_owned(), offset, b.len()));
                offset += b.len();
            });
            let analytic = grad.flatten();
            for (name, begin, len) in blocks {
                let mut diff2 = 0.0;
                let mut norm2 = 0.0f64;
                for idx in begin..begin + len {
                    let eval = |delta: f64| {
                        let mut q = params.clone();
                        let mut off = 0;
                        q.visit_mut(|_, b| {
                            if (off..off + b.len()).contains(&idx) {
                                b[idx - off] += delta;
                            }
                            off += b.len();
                        });
                        loss(&q, &stack, &targets).unwrap()
                    };
                    let numeric = (eval(step) - eval(-step)) / (2.0 * step);
                    diff2 += (numeric - analytic[idx]).powi(2);
                    norm2 += numeric.powi(2).max(analytic[idx].powi(2));
                }
                let rel = diff2.sqrt() / norm2.sqrt().max(1e-12);
                if rel > worst {
                    worst = rel;
                    worst_at = format!("{task}/{name}");
                }
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= 1e-4 && within_budget(elapsed, 60),
        format!("worst block relative error {worst:.2e} at {worst_at} (tol 1e-4), {elapsed:.2?} (budget 60 s)"),
    )
}

/// Direct SSIM: loops over every window with two-pass statistics.
fn reference_ssim(a: &Matrix<f64>, b: &Matrix<f64>, w: usize) -> f64 {
    let range = a.max_value().max(b.max_value()).max(1e-8);
    let (c1, c2) = ((0.01 * range).powi(2), (0.03 * range).powi(2));
    let n = (w * w) as f64;
    let (rows, cols) = a.shape();
    let mut total = 0.0;
    let mut count = 0;
    for r in 0..=rows - w {
        for c in 0..=cols - w {
            let cells: Vec<(f64, f64)> = (r..r + w)
                .flat_map(|i| (c..c + w).map(move |j| (i, j)))
                .map(|(i, j)| (a[(i, j)], b[(i, j)]))
                .collect();
            let ma = cells.iter().map(|p| p.0).sum::<f64>() / n;
            let mb = cells.iter().map(|p| p.1).sum::<f64>() / n;
            let va = cells.iter().map(|p| (p.0 - ma).powi(2)).sum::<f64>() / n;
            let vb = cells.iter().map(|p| (p.1 - mb).powi(2)).sum::<f64>() / n;
            let cov = cells.iter().map(|p| (p.0 - ma) * (p.1 - mb)).sum::<f64>() / n;
            total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}

fn ssim_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let cfg = SsimConfig::default();
    let mut worst = 0.0f64;
    let mut worst_self = 0.0f64;
    for _ in 0..20 {
        let (rows, cols) = (rng.random_range(7..=40), rng.random_range(7..=40));
        let a = Matrix::from_fn(rows, cols, |_, _| rng.random_range(0.0..1.0));
        let b = Matrix::from_fn(rows, cols, |r, c| (a[(r, c)] + rng.random_range(-0.3f64..0.3)).max(0.0f64));
        worst = worst.max((ssim(&a, &b, &cfg).unwrap() - reference_ssim(&a, &b, cfg.window)).abs());
        worst_self = worst_self.max((ssim(&a, &a, &cfg).unwrap() - 1.0).abs());
    }
    outcome(
        worst <= 1e-6 && worst_self <= 1e-9,
        format!("max deviation from reference {worst:.2e} (tol 1e-6), |ssim(m,m)-1| <= {worst_self:.2e} (tol 1e-9)"),
    )
}

// ---------------------------------------------------------------------------
// Synthetic harness settings.

fn stacks(traces: &[olakit::trace::AttentionTrace], orders: &[Order]) -> Vec<OlaStack> {
    let pre = PreprocessConfig::default();
    traces.iter().map(|t| trace_stack(t, orders, &pre).unwrap()).collect()
}

fn tagging_config() -> SynthConfig {
    SynthConfig {
        logit_scale: 1.0,
        ..Default::default()
    }
}

const TAGS: usize = 4;
const TAG_SIGNAL: TagSignal = TagSignal {
    num_tags: TAGS,
    strength: 3.0,
};

fn tagging_dataset(model: &str, coupling: Coupling, texts: usize, seed: u64) -> (Vec<LabeledExample>, LabelSet) {
    let cfg = tagging_config();
    let records = synth_tag_labels(&cfg, seed, texts, TAGS);
    let labels = LabelSet::from_names((0..TAGS).map(|k| format!("T{k}")));
    let traces = synth_corpus(&cfg, seed, model, texts, coupling, Some(TAG_SIGNAL)).unwrap();
    let examples = stacks(&traces, &[Order::Level(1), Order::Level(2)])
        .into_iter()
        .zip(&records)
        .map(|(s, r)| align_example(s, Task::Pos, &r.annotation, &labels).unwrap())
        .collect();
    (examples, labels)
}

fn tagging_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 100,
        learning_rate: 0.02,
        batch_size: 16,
        hidden: 32,
        seed,
    }
}

fn self_retrieval_and_transfer() -> Outcome {
    let cfg = SynthConfig::default();
    let traces = synth_corpus(&cfg, 7, "a", 50, Coupling::Shared, None).unwrap();
    let gallery = stacks(&traces, &[Order::Level(1)]);
    let hits = retrieve(&gallery, &gallery, &[1]).unwrap().hits(1).unwrap();

    let (data, labels) = tagging_dataset("a", Coupling::Shared, 40, 7);
    let train = TrainConfig {
        epochs: 5,
        ..tagging_train_config(7)
    };
    let (params, _) = train_probe(&data, labels, &train).unwrap();
    let direct = eval_probe(&params, &data, Task::Pos).unwrap();
    let transferred = transfer_eval(&params, &data).unwrap();
    outcome(
        hits == 1.0 && direct == transferred,
        format!(
            "self Hits@1 = {hits}, eval accuracy {:.4} vs transfer accuracy {:.4} (must be identical)",
            direct.primary(),
            transferred.primary()
        ),
    )
}

fn three_se(p: f64, n: usize) -> f64 {
    3.0 * (p * (1.0 - p) / n as f64).sqrt()
}

fn perturbation_control() -> Outcome {
    let start = Instant::now();
    let m = 200;
    let seed = 0;
    let orders = [Order::Level(1)];
    let cfg = SynthConfig::default();
    let run = |coupling| {
        let a = stacks(&synth_corpus(&cfg, seed, "a", m, coupling, None).unwrap(), &orders);
        let b = stacks(&synth_corpus(&cfg, seed, "b", m, coupling, None).unwrap(), &orders);
        retrieve(&b, &a, &[1]).unwrap().hits(1).unwrap()
    };
    let independent = run(Coupling::Independent);
    let correlated = run(Coupling::Shared);
    let chance = 1.0 / m as f64;
    let band = three_se(chance, m);
    let elapsed = start.elapsed();
    outcome(
        (independent - chance).abs() <= band && correlated > 0.9 && within_budget(elapsed, 120),
        format!(
            "independent Hits@1 {independent:.3} (chance {chance:.3} ± {band:.3}), correlated Hits@1 {correlated:.3} (> 0.9), {elapsed:.2?} (budget 120 s)"
        ),
    )
}

fn order_trend() -> Outcome {
    let cfg = SynthConfig {
        num_layers: 6,
        noise: 1.0,
        noise_growth: 0.25,
        ..Default::default()
    };
    let m = 100;
    let seeds = 5u64;
    let mut mean = [0.0f64; 3];
    for seed in 0..seeds {
        let a = synth_corpus(&cfg, seed, "a", m, Coupling::Shared, None).unwrap();
        let b = synth_corpus(&cfg, seed, "b", m, Coupling::Shared, None).unwrap();
        for (slot, k) in mean.iter_mut().zip(1..=3) {
            let orders = [Order::Level(k)];
            *slot += retrieve(&stacks(&b, &orders), &stacks(&a, &orders), &[1]).unwrap().hits(1).unwrap() / seeds as f64;
        }
    }
    outcome(
        mean[0] >= mean[1] && mean[1] >= mean[2],
        format!(
            "mean Hits@1 over {seeds} seeds: order 1 {:.3}, order 2 {:.3}, order 3 {:.3}",
            mean[0], mean[1], mean[2]
        ),
    )
}

fn synthetic_transfer() -> Outcome {
    let seed = 0;
    let (texts, split) = (200, 150);
    let (a, labels) = tagging_dataset("a", Coupling::Shared, texts, seed);
    let (b, _) = tagging_dataset("b", Coupling::Shared, texts, seed);
    let (r, _) = tagging_dataset("r", Coupling::Independent, texts, seed);
    let (params, _) = train_probe(&a[..split], labels, &tagging_train_config(seed)).unwrap();
    let own = transfer_eval(&params, &a[split..]).unwrap();
    let other = transfer_eval(&params, &b[split..]).unwrap();
    let random = transfer_eval(&params, &r[split..]).unwrap();
    let chance = 1.0 / TAGS as f64;
    let band = three_se(chance, random.support);
    let (own, other, rnd) = (own.primary(), other.primary(), random.primary());
    outcome(
        other >= 0.8 * own && (rnd - chance).abs() <= band,
        format!(
            "self accuracy {own:.3}, transfer {other:.3} ({:.1}% of self, need >= 80%), random {rnd:.3} (chance {chance:.3} ± {band:.3})",
            100.0 * other / own
        ),
    )
}

fn main() {
    let checks: [(&str, fn() -> Outcome); 10] = [
        ("decomposition identity", decomposition_identity),
        ("recurrence vs subset enumeration", recurrence_matches_enumeration),
        ("first-order closed form", first_order_closed_form),
        ("norm-baseline reconstruction", norm_reconstruction),
        ("probe gradient checks", gradient_checks),
        ("SSIM oracle", ssim_oracle),
        ("self-retrieval and self-transfer", self_retrieval_and_transfer),
        ("perturbation control", perturbation_control),
        ("order trend", order_trend),
        ("synthetic transfer", synthetic_transfer),
    ];
    assert_eq!(binomial(4, 2), 6.0);
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let result = check();
        let status = if result.pass { "PASS" } else { "FAIL" };
        println!("acceptance {:>2} {status}: {name}: {}", i + 1, result.detail);
        failed += usize::from(!result.pass);
    }
    println!("acceptance: {} passed, {failed} failed", checks.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
