//! Acceptance criteria for the toolkit. Runs as a plain binary so every
//! criterion prints one PASS/FAIL line; the process fails if any does.
//!
//! `cargo test -p kalahash-core --test acceptance`

use std::time::{Duration, Instant};

use rand::Rng as _;

use kalahash_core::dataio::{generate_synthetic, make_shot_split, SynthSpec};
use kalahash_core::encoder::{
    adapted_projection, encode_image, AdapterVars, BlockVars, CloraContext, FrozenBlock, Pooling,
    Target,
};
use kalahash_core::hashing::{
    hash_forward, loss_alignment, loss_quantization, loss_similarity, similarity_matrix, HashLayer,
    HashVars, LossWeights,
};
use kalahash_core::kiddo::{brute_force_solve, dcc_solve, dcc_update_bit, objective};
use kalahash_core::knowledge::{AffineVars, KnowledgePool};
use kalahash_core::model::TrainConfig;
use kalahash_core::pipeline::{measure_overhead, run_experiment, Dataset, TimingSetup};
use kalahash_core::retrieval::{average_precision, hamming, map_at_k, silhouette, Labels};
use kalahash_core::tensor::rng::{derive_seed, seeded};
use kalahash_core::tensor::{grad_check_many, Graph, Mat, Rng, Var};
use kalahash_core::{CodeMatrix, DccProblem, HashModel, PackedCodes, RetrievalIndex};

struct Outcome {
    pass: bool,
    detail: String,
}

type Check = fn() -> Outcome;

fn main() {
    let criteria: [(&str, Check, Option<Duration>); 6] = [
        (
            "gradient suite",
            gradient_suite,
            Some(Duration::from_secs(30)),
        ),
        ("kiddo oracle", kiddo_oracle, Some(Duration::from_secs(60))),
        (
            "retrieval oracles",
            retrieval_oracles,
            Some(Duration::from_secs(30)),
        ),
        ("zero-adaptation equivalence", zero_adaptation, None),
        (
            "synthetic ablation",
            synthetic_ablation,
            Some(Duration::from_secs(300)),
        ),
        ("encode overhead", encode_overhead, None),
    ];
    let mut failed = 0;
    for (name, check, budget) in criteria {
        let start = Instant::now();
        let mut out = check();
        let took = start.elapsed();
        if let Some(b) = budget {
            if took > b {
                out.pass = false;
                out.detail
                    .push_str(&format!("; over the {}s budget", b.as_secs()));
            }
        }
        failed += !out.pass as usize;
        println!(
            "{} {name}: {} ({:.1}s)",
            if out.pass { "PASS" } else { "FAIL" },
            out.detail,
            took.as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} of 6 criteria failed");
        std::process::exit(1);
    }
    println!("all 6 criteria passed");
}

// ---------------------------------------------------------------- gradients

const GRAD_POINTS: u64 = 10;
const GRAD_STEP: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;

/// Contracts an arbitrary output with fixed random weights so every entry
/// contributes a distinct gradient.
fn probe(g: &mut Graph, out: Var, rng: &mut Rng) -> kalahash_core::Result<Var> {
    let (r, c) = g.value(out).shape();
    let w = g.constant(Mat::randn(r, c, 1.0, rng));
    let m = g.mul(out, w)?;
    Ok(g.sum(m))
}

fn small_block(rng: &mut Rng, pooling: Pooling) -> FrozenBlock {
    FrozenBlock::random(8, 2, 16, 6, pooling, rng).unwrap()
}

fn clora_ctx(khat: Var, qs: &[Var], targets: &[Target]) -> CloraContext {
    let adapters = qs
        .iter()
        .zip(targets)
        .map(|(&q, &target)| AdapterVars {
            target,
            q,
            eta: 1.0,
        })
        .collect();
    CloraContext {
        khat,
        adapters,
        rank: 1,
        skip_class_token: false,
    }
}

fn gradient_cases() -> Vec<(&'static str, Box<dyn Fn(u64) -> kalahash_core::Result<f64>>)> {
    vec![
        (
            "matmul",
            Box::new(|s| {
                let mut rng = seeded(s);
                let pts = [
                    Mat::randn(3, 4, 1.0, &mut rng),
                    Mat::randn(4, 5, 1.0, &mut rng),
                ];
                grad_check_many(
                    |g, v| {
                        let y = g.matmul(v[0], v[1])?;
                        probe(g, y, &mut seeded(s + 100))
                    },
                    &pts,
                    GRAD_STEP,
                )
            }),
        ),
        (
            "softmax",
            Box::new(|s| {
                let mut rng = seeded(s);
                let pts = [Mat::randn(3, 6, 2.0, &mut rng)];
                grad_check_many(
                    |g, v| {
                        let y = g.softmax_rows(v[0]);
                        probe(g, y, &mut seeded(s + 100))
                    },
                    &pts,
                    GRAD_STEP,
                )
            }),
        ),
        (
            "layer-norm",
            Box::new(|s| {
                let mut rng = seeded(s);
                let pts = [
                    Mat::randn(4, 6, 1.5, &mut rng),
                    Mat::uniform(1, 6, 0.5, 1.5, &mut rng),
                    Mat::randn(1, 6, 0.1, &mut rng),
                ];
                grad_check_many(
                    |g, v| {
                        let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
                        probe(g, y, &mut seeded(s + 100))
                    },
                    &pts,
                    GRAD_STEP,
                )
            }),
        ),
        (
            "batch-norm",
            Box::new(|s| {
                let mut rng = seeded(s);
                let layer = HashLayer::new(4, 6, &mut rng);
                let pts = [
                    Mat::randn(5, 6, 1.0, &mut rng),
                    layer.fc.weight.clone(),
                    layer.fc.bias.clone(),
                    Mat::uniform(1, 4, 0.5, 1.5, &mut rng),
                    Mat::randn(1, 4, 0.1, &mut rng),
                ];
                grad_check_many(
                    |g, v| {
                        let vars = HashVars {
                            fc: AffineVars {
                                weight: v[1],
                                bias: v[2],
                            },
                            gain: v[3],
                            bias: v[4],
                        };
                        let out = hash_forward(g, v[0], &vars, &layer, true)?;
                        probe(g, out.h, &mut seeded(s + 100))
                    },
                    &pts,
                    GRAD_STEP,
                )
            }),
        ),
        (
            "tanh",
            Box::new(|s| {
                let pts = [Mat::randn(4, 5, 1.5, &mut seeded(s))];
                grad_check_many(
                    |g, v| {
                        let y = g.tanh(v[0]);
                        probe(g, y, &mut seeded(s + 100))
                    },
                    &pts,
                    GRAD_STEP,
                )
            }),
        ),
        (
            "gelu",
            Box::new(|s| {
                let pts = [Mat::randn(4, 5, 1.5, &mut seeded(s))];
                grad_check_many(
                    |g, v| {
                        let y = g.gelu(v[0]);
                        probe(g, y, &mut seeded(s + 100))
                    },
                    &pts,
                    GRAD_STEP,
                )
            }),
        ),
        (
            "softplus",
            Box::new(|s| {
                let pts = [Mat::randn(4, 5, 3.0, &mut seeded(s))];
                grad_check_many(
                    |g, v| {
                        let y = g.softplus(v[0]);
                        probe(g, y, &mut seeded(s + 100))
                    },
                    &pts,
                    GRAD_STEP,
                )
            }),
        ),
        (
            "attention block",
            Box::new(|s| {
                // adapters on all four projections, so the gradient passes through
                // attention, both layer norms, the MLP and the pooled projection
                let mut rng = seeded(s);
                let block = small_block(&mut rng, Pooling::ClassToken);
                let tokens = Mat::randn(5, 8, 1.0, &mut rng);
                let khat = Mat::randn(4, 8, 1.0, &mut rng);
                let targets = [Target::Q, Target::K, Target::V, Target::O];
                let pts: Vec<Mat> = targets
                    .iter()
                    .map(|_| Mat::randn(1, 8, 0.3, &mut rng))
                    .collect();
                grad_check_many(
                    |g, v| {
                        let bv = BlockVars::bind(g, &block);
                        let kh = g.constant(khat.clone());
                        let ctx = clora_ctx(kh, v, &targets);
                        let (f, _) = encode_image(g, &tokens, &bv, Some(&ctx))?;
                        probe(g, f, &mut seeded(s + 100))
                    },
                    &pts,
                    GRAD_STEP,
                )
            }),
        ),
        (
            "clora path",
            Box::new(|s| {
                let mut rng = seeded(s);
                let block = small_block(&mut rng, Pooling::Mean);
                let tokens = Mat::randn(5, 8, 1.0, &mut rng);
                let w = kalahash_core::knowledge::Affine {
                    weight: Mat::randn(8, 8, 0.3, &mut rng),
                    bias: Mat::randn(1, 8, 0.1, &mut rng),
                };
                let pts = [
                    Mat::randn(4, 8, 1.0, &mut rng),
                    Mat::randn(1, 8, 0.3, &mut rng),
                    Mat::randn(1, 8, 0.3, &mut rng),
                    Mat::randn(3, 8, 1.0, &mut rng),
                ];
                // whole encoder w.r.t. pool and both factors
                let enc = grad_check_many(
                    |g, v| {
                        let bv = BlockVars::bind(g, &block);
                        let ctx = clora_ctx(v[0], &v[1..3], &[Target::K, Target::V]);
                        let (f, _) = encode_image(g, &tokens, &bv, Some(&ctx))?;
                        probe(g, f, &mut seeded(s + 100))
                    },
                    &pts[..3],
                    GRAD_STEP,
                )?;
                // the adapted projection on its own, including its input
                let proj = grad_check_many(
                    |g, v| {
                        let wv = AffineVars::bind(g, &w, false);
                        let a = AdapterVars {
                            target: Target::V,
                            q: v[1],
                            eta: 0.7,
                        };
                        let kv = g.gather_rows(v[0], &[2])?;
                        let y = adapted_projection(g, v[3], &wv, Some((&a, kv)))?;
                        probe(g, y, &mut seeded(s + 101))
                    },
                    &pts,
                    GRAD_STEP,
                )?;
                Ok(enc.max(proj))
            }),
        ),
        (
            "similarity loss",
            Box::new(|s| {
                let mut rng = seeded(s);
                let labels = random_labels(6, 3, &mut rng);
                let sim = similarity_matrix(&labels);
                let pts = [Mat::uniform(6, 8, -0.99, 0.99, &mut rng)];
                grad_check_many(|g, v| loss_similarity(g, v[0], &sim), &pts, GRAD_STEP)
            }),
        ),
        (
            "quantization loss",
            Box::new(|s| {
                let mut rng = seeded(s);
                let b = CodeMatrix::random(8, 6, &mut rng).into_mat();
                let pts = [Mat::uniform(6, 8, -0.99, 0.99, &mut rng)];
                grad_check_many(|g, v| loss_quantization(g, v[0], &b), &pts, GRAD_STEP)
            }),
        ),
        (
            "alignment loss",
            Box::new(|s| {
                let mut rng = seeded(s);
                let y = random_labels(6, 3, &mut rng);
                let b = CodeMatrix::random(8, 6, &mut rng).into_mat();
                let pts = [Mat::randn(8, 3, 0.5, &mut rng)];
                grad_check_many(|g, v| loss_alignment(g, &y, v[0], &b), &pts, GRAD_STEP)
            }),
        ),
    ]
}

/// C×n multi-hot columns with at least one label each.
fn random_labels(n: usize, c: usize, rng: &mut Rng) -> Mat {
    let mut y = Mat::zeros(c, n);
    for j in 0..n {
        y.set(rng.random_range(0..c), j, 1.0);
        if rng.random_bool(0.3) {
            y.set(rng.random_range(0..c), j, 1.0);
        }
    }
    y
}

fn gradient_suite() -> Outcome {
    let mut worst_name = "";
    let mut worst = 0.0f64;
    let mut bad = Vec::new();
    let cases = gradient_cases();
    for (name, case) in &cases {
        let mut op_worst = 0.0f64;
        for p in 0..GRAD_POINTS {
            match case(derive_seed(7, p)) {
                Ok(e) => op_worst = op_worst.max(e),
                Err(e) => {
                    bad.push(format!("{name}: {e}"));
                    op_worst = f64::INFINITY;
                }
            }
        }
        if op_worst > GRAD_TOL {
            bad.push(format!("{name} {op_worst:.2e}"));
        }
        if op_worst >= worst {
            worst = op_worst;
            worst_name = name;
        }
    }
    Outcome {
        pass: bad.is_empty(),
        detail: format!(
            "{} ops x {GRAD_POINTS} points, max rel err {worst:.2e} ({worst_name}) vs {GRAD_TOL:.0e}{}",
            cases.len(),
            if bad.is_empty() { String::new() } else { format!("; failing: {}", bad.join(", ")) }
        ),
    }
}

// ---------------------------------------------------------------- kiddo

/// Random labels, anchors and features at the given objective weights.
fn random_problem(alpha: f64, beta: f64, rng: &mut Rng) -> DccProblem {
    let bits = rng.random_range(1..=4);
    let n = rng.random_range(1..=(16 / bits).min(6));
    let c = rng.random_range(2..=4);
    let y = random_labels(n, c, rng);
    let t = Mat::randn(bits, c, 1.0, rng);
    let h = Mat::randn(n, bits, 1.0, rng).map(f64::tanh);
    DccProblem::new(y, t, h, alpha, beta).unwrap()
}

/// Best of five runs from uniformly random codes.
fn five_random_restarts(p: &DccProblem, rng: &mut Rng) -> f64 {
    (0..5)
        .map(|_| {
            let b0 = CodeMatrix::random(p.bits(), p.samples(), rng);
            dcc_solve(p, b0, 1000).unwrap().objective
        })
        .fold(f64::INFINITY, f64::min)
}

struct OracleTally {
    matched: usize,
    below: usize,
    rises: usize,
    updates: usize,
}

fn dcc_against_enumeration(alpha: f64, beta: f64, instances: u64, stream: u64) -> OracleTally {
    let mut tally = OracleTally {
        matched: 0,
        below: 0,
        rises: 0,
        updates: 0,
    };
    for i in 0..instances {
        let mut rng = seeded(derive_seed(stream, i));
        let p = random_problem(alpha, beta, &mut rng);
        let (_, best) = brute_force_solve(&p).unwrap();
        let got = five_random_restarts(&p, &mut rng);
        let tol = 1e-9 * best.abs().max(1.0);
        tally.below += (got < best - tol) as usize;
        tally.matched += ((got - best).abs() <= tol) as usize;

        let mut b = CodeMatrix::random(p.bits(), p.samples(), &mut rng);
        let mut prev = objective(&p, &b).unwrap();
        for _ in 0..3 {
            for bit in 0..p.bits() {
                dcc_update_bit(&p, &mut b, bit).unwrap();
                let now = objective(&p, &b).unwrap();
                tally.updates += 1;
                tally.rises += (now > prev + 1e-9) as usize;
                prev = now;
            }
        }
    }
    tally
}

fn kiddo_oracle() -> Outcome {
    const INSTANCES: u64 = 200;
    let defaults = LossWeights::default();
    let t = dcc_against_enumeration(defaults.alpha, defaults.beta, INSTANCES, 11);
    let rate = t.matched as f64 / INSTANCES as f64;
    // not part of the criterion: equal weights couple the bit planes much
    // more strongly and leave more coordinate-wise local minima
    let stress = dcc_against_enumeration(1.0, 1.0, INSTANCES, 12);
    Outcome {
        pass: rate >= 0.95 && t.below == 0 && t.rises == 0 && stress.below == 0 && stress.rises == 0,
        detail: format!(
            "alpha={}, beta={}: {}/{INSTANCES} at the enumerated optimum ({:.1}%, need 95%), {} below it, \
             {} of {} bit-plane updates increased the objective [alpha=beta=1 for reference: {}/{INSTANCES}, {} below, {} increases]",
            defaults.alpha, defaults.beta, t.matched, rate * 100.0, t.below, t.rises, t.updates,
            stress.matched, stress.below, stress.rises
        ),
    }
}

// ---------------------------------------------------------------- retrieval

fn naive_hamming(a: &Mat, i: usize, b: &Mat, j: usize) -> u32 {
    a.row(i)
        .iter()
        .zip(b.row(j))
        .filter(|(x, y)| x != y)
        .count() as u32
}

fn retrieval_oracles() -> Outcome {
    let mut problems = Vec::new();

    // packed vs naive Hamming
    let mut pairs = 0;
    let mut rng = seeded(21);
    for &bits in &[8usize, 16, 32, 64, 128] {
        let a = Mat::randn(2000, bits, 1.0, &mut rng).map(|v| if v >= 0.0 { 1.0 } else { -1.0 });
        let b = Mat::randn(2000, bits, 1.0, &mut rng).map(|v| if v >= 0.0 { 1.0 } else { -1.0 });
        let (pa, pb) = (PackedCodes::from_signs(&a), PackedCodes::from_signs(&b));
        for i in 0..2000 {
            pairs += 1;
            if hamming(pa.code(i), pb.code(i)) != naive_hamming(&a, i, &b, i) {
                problems.push(format!("hamming mismatch at width {bits}"));
                break;
            }
        }
    }

    // hand-enumerated average precision
    let ap_cases: [(&[bool], usize, f64); 6] = [
        (&[true, false, true], 3, 5.0 / 6.0),
        (&[true, true, true], 3, 1.0),
        (&[false, false, false], 3, 0.0),
        (&[false, true, false, true], 4, 0.5),
        (&[true, false, true], 2, 1.0),
        (
            &[false, false, true, true],
            4,
            (1.0 / 3.0 + 2.0 / 4.0) / 2.0,
        ),
    ];
    for (rel, k, want) in ap_cases {
        let got = average_precision(rel, k);
        if (got - want).abs() > 1e-12 {
            problems.push(format!("AP{rel:?}@{k} = {got}, want {want}"));
        }
    }
    // end to end: gallery at distances 0..3 from the query, classes A B A B;
    // a class-A query sees (1,0,1,0) → 5/6, a class-B query (0,1,0,1) → 1/2
    let signs = |bits: &[f64]| Mat::from_rows(&[bits.to_vec()]);
    let gallery = Mat::from_rows(&[
        vec![1.0, 1.0, 1.0, 1.0],
        vec![-1.0, 1.0, 1.0, 1.0],
        vec![-1.0, -1.0, 1.0, 1.0],
        vec![-1.0, -1.0, -1.0, 1.0],
    ]);
    let index = RetrievalIndex::new(
        PackedCodes::from_signs(&gallery),
        Labels::single(&[0, 1, 0, 1], 2).unwrap(),
        (0..4).map(|i| format!("g{i}")).collect(),
    )
    .unwrap();
    let q = signs(&[1.0, 1.0, 1.0, 1.0]);
    let queries = PackedCodes::from_signs(&Mat::from_rows(&[q.row(0).to_vec(), q.row(0).to_vec()]));
    let map = map_at_k(&index, &queries, &Labels::single(&[0, 1], 2).unwrap(), 4).unwrap();
    if (map - 2.0 / 3.0).abs() > 1e-12 {
        problems.push(format!("end-to-end mAP {map}, want 2/3"));
    }
    // equal distances rank by gallery index: g1 and g2 both differ from the
    // query in one bit, so a class-B query sees (1, 0) → 1
    let tied = Mat::from_rows(&[vec![-1.0, 1.0], vec![1.0, -1.0]]);
    let index = RetrievalIndex::new(
        PackedCodes::from_signs(&tied),
        Labels::single(&[1, 0], 2).unwrap(),
        vec!["g1".into(), "g2".into()],
    )
    .unwrap();
    let tq = PackedCodes::from_signs(&signs(&[1.0, 1.0]));
    let map = map_at_k(&index, &tq, &Labels::single(&[1], 2).unwrap(), 1).unwrap();
    if map != 1.0 {
        problems.push(format!("tie-break mAP {map}, want 1"));
    }

    // silhouette vs an O(n²) reference
    let mut worst_sil = 0.0f64;
    for (seed, bits, n, classes) in [
        (1u64, 16usize, 60usize, 4usize),
        (2, 64, 45, 3),
        (3, 8, 30, 5),
    ] {
        let mut rng = seeded(seed);
        let codes = Mat::randn(n, bits, 1.0, &mut rng).map(|v| if v >= 0.0 { 1.0 } else { -1.0 });
        let mut labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        labels[0] = classes; // a singleton class
        let got = silhouette(&PackedCodes::from_signs(&codes), &labels).unwrap();
        let want = naive_silhouette(&codes, &labels);
        worst_sil = worst_sil.max((got - want).abs());
    }
    if worst_sil > 1e-9 {
        problems.push(format!("silhouette off by {worst_sil:.2e}"));
    }

    Outcome {
        pass: problems.is_empty(),
        detail: format!(
            "{pairs} Hamming pairs, {} AP cases + 2 ranked-index cases, silhouette max diff {worst_sil:.1e}{}",
            ap_cases.len(),
            if problems.is_empty() { String::new() } else { format!("; {}", problems.join("; ")) }
        ),
    }
}

/// Textbook silhouette on the [0, 100] scale; singleton members score 0.
fn naive_silhouette(codes: &Mat, labels: &[usize]) -> f64 {
    let n = codes.rows();
    let d = |i: usize, j: usize| naive_hamming(codes, i, codes, j) as f64;
    let mut total = 0.0;
    for i in 0..n {
        let own: Vec<usize> = (0..n)
            .filter(|&j| j != i && labels[j] == labels[i])
            .collect();
        if own.is_empty() {
            continue;
        }
        let a = own.iter().map(|&j| d(i, j)).sum::<f64>() / own.len() as f64;
        let mut b = f64::INFINITY;
        let mut others: Vec<usize> = labels.iter().copied().filter(|&l| l != labels[i]).collect();
        others.sort_unstable();
        others.dedup();
        for c in others {
            let members: Vec<usize> = (0..n).filter(|&j| labels[j] == c).collect();
            b = b.min(members.iter().map(|&j| d(i, j)).sum::<f64>() / members.len() as f64);
        }
        if a.max(b) > 0.0 {
            total += (b - a) / a.max(b);
        }
    }
    (total / n as f64 + 1.0) * 50.0
}

// ---------------------------------------------------------------- zero adaptation

fn zero_adaptation() -> Outcome {
    let spec = SynthSpec {
        classes: 6,
        query_per_class: 2,
        database_per_class: 3,
        ..SynthSpec::default()
    };
    let (store, manifest) = generate_synthetic(&spec).unwrap();
    let ds = Dataset::new(store, manifest).unwrap();
    let block = ds.block().unwrap();
    let pool_a = ds.pool().unwrap();
    let mut rng = seeded(5);
    let pool_b = KnowledgePool::new(
        Mat::randn(pool_a.classes(), pool_a.dim(), 3.0, &mut rng),
        pool_a.class_names.clone(),
        pool_a.prompt_template.clone(),
    )
    .unwrap();

    let cfg = TrainConfig::default();
    let model_a = HashModel::new(block.clone(), pool_a.clone(), &cfg).unwrap();
    let model_b = HashModel::new(block.clone(), pool_b.clone(), &cfg).unwrap();

    let features = |pool: &KnowledgePool, tokens: &Mat| -> Mat {
        let mut g = Graph::new();
        let bv = BlockVars::bind(&mut g, &block);
        let khat = g.constant(pool.k.clone());
        let qs: Vec<Var> = [Target::K, Target::V]
            .iter()
            .map(|_| g.constant(Mat::zeros(1, block.width())))
            .collect();
        let ctx = clora_ctx(khat, &qs, &[Target::K, Target::V]);
        let (f, _) = encode_image(&mut g, tokens, &bv, Some(&ctx)).unwrap();
        g.value(f).clone()
    };

    let mut identical = true;
    let mut worst = 0.0f64;
    let records = &ds.manifest.records;
    for r in records {
        let tokens = ds.store.mat(&r.tensor).unwrap();
        let fa = features(&pool_a, &tokens);
        identical &= fa == features(&pool_b, &tokens);
        let reference = ds.store.mat(r.reference.as_ref().unwrap()).unwrap();
        worst = worst.max(
            fa.zip_map(&reference, |a, b| (a - b).abs())
                .unwrap()
                .max_abs(),
        );
    }
    let all: Vec<Mat> = records
        .iter()
        .map(|r| ds.store.mat(&r.tensor).unwrap())
        .collect();
    let codes_identical = model_a.encode(&all).unwrap() == model_b.encode(&all).unwrap();

    Outcome {
        pass: identical && codes_identical && worst <= 1e-4,
        detail: format!(
            "{} images: features under two pools {}, hash outputs {}, max |feature - stored reference| {worst:.1e} (tol 1e-4)",
            records.len(),
            if identical { "identical" } else { "DIFFER" },
            if codes_identical { "identical" } else { "DIFFER" },
        ),
    }
}

// ---------------------------------------------------------------- ablation

/// Offset norm of the synthetic samples around their class centre. At the
/// generator default (0.1) every variant retrieves perfectly and no ordering
/// can show; 1.0 leaves the frozen-backbone baseline well short of perfect.
const ABLATION_SPREAD: f64 = 1.0;
const ABLATION_SEEDS: u64 = 5;

/// Mean mAP (0–100) of full, no-clora, no-kiddo and neither.
fn ablation_means(train_f: bool) -> [f64; 4] {
    let variants = [(true, true), (false, true), (true, false), (false, false)];
    let mut means = [0.0f64; 4];
    for seed in 0..ABLATION_SEEDS {
        let spec = SynthSpec {
            classes: 10,
            query_per_class: 5,
            database_per_class: 21,
            spread: ABLATION_SPREAD,
            seed,
            ..SynthSpec::default()
        };
        let (store, manifest) = generate_synthetic(&spec).unwrap();
        let ds = Dataset::new(store, manifest).unwrap();
        let split = make_shot_split(&ds.manifest, 1, seed).unwrap();
        assert_eq!((split.gallery_ids.len(), split.query_ids.len()), (200, 50));
        for (i, &(clora, kiddo)) in variants.iter().enumerate() {
            let cfg = TrainConfig {
                seed,
                bits: 16,
                clora,
                kiddo,
                train_f,
                ..TrainConfig::default()
            };
            let e = run_experiment(&ds, 1, seed, &cfg).unwrap();
            means[i] += e.report.map_at_k * 100.0 / ABLATION_SEEDS as f64;
        }
    }
    means
}

fn synthetic_ablation() -> Outcome {
    let [full, no_clora, no_kiddo, neither] = ablation_means(true);
    let pass = full - no_clora >= 3.0 && full - no_kiddo >= 3.0 && full - neither >= 5.0;
    // not part of the criterion: the same grid with the selection projection
    // held at its initial value
    let [ff, fc, fk, fn_] = ablation_means(false);
    Outcome {
        pass,
        detail: format!(
            "mean mAP over {ABLATION_SEEDS} seeds: full {full:.2}, no-clora {no_clora:.2} ({:+.2}, need +3), \
             no-kiddo {no_kiddo:.2} ({:+.2}, need +3), neither {neither:.2} ({:+.2}, need +5) \
             [F frozen, for reference: {ff:.2} / {fc:.2} / {fk:.2} / {fn_:.2}]",
            full - no_clora,
            full - no_kiddo,
            full - neither
        ),
    }
}

// ---------------------------------------------------------------- timing

fn encode_overhead() -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    for pool in [10, 100, 1000] {
        let setup = TimingSetup {
            pool,
            repetitions: 20,
            ..TimingSetup::default()
        };
        let r = measure_overhead(&setup).unwrap();
        pass &= r.overhead <= 0.10 && r.with_adapters.repetitions >= 10;
        parts.push(format!(
            "pool {pool}: {:.3} vs {:.3} ms ({:+.1}%)",
            r.with_adapters.median_ms,
            r.without_adapters.median_ms,
            r.overhead * 100.0
        ));
    }
    Outcome {
        pass,
        detail: format!(
            "t=50, width=128, 20 reps, median per image, limit +10%: {}",
            parts.join(", ")
        ),
    }
}
