//! End-to-end acceptance checks. Runs without the libtest harness so that
//! every criterion prints exactly one PASS or FAIL line.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use spx_core::evalreport::{
    evaluate_layer, normality_curve, random_mask_variance_ratio, split_holdout,
    targeted_ablation, AblationConfig, AblationSelector, LayerEvaluation, RecordOptions,
};
use spx_core::expansion::{
    expand_model, layer_seed, prune_model_sequential, ExpansionConfig, ExpertBuildConfig,
    LayerId, LayerScope, SequentialPruneOptions,
};
use spx_core::metrics::{
    mapping_difficulty, midpoint_quantiles, pearson, select_wasserstein_neurons,
    wd_to_gaussian, NeuronOutputs, WdReport,
};
use spx_core::numerics::{normal_pdf, Matrix, SeededRng};
use spx_core::pruner::{
    accumulate_hessian, baseline_prune, rtn_quantize, sparsegpt_prune, BaselineMethod,
    HessianState, PruneSpec, DEFAULT_DAMPING,
};
use spx_core::synth::{gen_planted_model, PlantedModel, SynthSpec};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn random(seed: u64, r: usize, c: usize) -> Matrix {
    let mut rng = SeededRng::new(seed);
    Matrix::from_fn(r, c, |_, _| rng.normal())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

// ---------------------------------------------------------------------------
// Shared planted model

const HIGH_SPARSITY: f64 = 0.9;
const CLUSTER_GRID: [usize; 5] = [1, 2, 4, 8, 16];

struct Planted {
    planted: PlantedModel,
    x_fit: Matrix,
    x_hold: Matrix,
    /// Block-0 up evaluation at 90% sparsity for each cluster count.
    by_clusters: BTreeMap<usize, LayerEvaluation>,
}

fn planted() -> &'static Planted {
    static CELL: OnceLock<Planted> = OnceLock::new();
    CELL.get_or_init(|| {
        let planted = gen_planted_model(&SynthSpec::default()).expect("planted model");
        let (x_fit, x_hold) = split_holdout(&planted.calibration.data, 0.25).expect("split");
        let id = LayerId::up(0);
        let w = &planted.model.layer(id).weight;
        let build = ExpertBuildConfig::new(PruneSpec::unstructured(HIGH_SPARSITY));
        let opts = RecordOptions {
            pair_budget: 0,
            ..RecordOptions::default()
        };
        let by_clusters = CLUSTER_GRID
            .iter()
            .map(|&c| {
                let ev = evaluate_layer(w, &x_fit, &x_hold, c, &build, layer_seed(0, id), &opts)
                    .expect("layer evaluation");
                (c, ev)
            })
            .collect();
        Planted {
            planted,
            x_fit,
            x_hold,
            by_clusters,
        }
    })
}

// ---------------------------------------------------------------------------
// 1-6, 12: exact and oracle checks

fn c1_wd_calibration() -> Check {
    let mut rng = SeededRng::new(1);
    let wd_normal = wd_to_gaussian(&NeuronOutputs::new(0, rng.normals(100_000)).unwrap()).unwrap();
    ensure(wd_normal <= 0.02, format!("normal draws WD {wd_normal} > 0.02"))?;

    for n in [2, 17, 1000, 4097] {
        let q = midpoint_quantiles(n);
        let wd = wd_to_gaussian(&NeuronOutputs::new(0, q).unwrap()).unwrap();
        ensure(wd == 0.0, format!("quantile-matched n={n} gave {wd}"))?;
    }

    // oracle: E|Z − sign(Z)| = 2∫₀^∞ |z − 1| φ(z) dz by composite Simpson
    let (a, b, n) = (0.0f64, 12.0f64, 24_000usize);
    let h = (b - a) / n as f64;
    let f = |z: f64| (z - 1.0).abs() * normal_pdf(z);
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    let oracle = 2.0 * s * h / 3.0;
    let mut v = vec![-1.0; 50_000];
    v.extend(vec![1.0; 50_000]);
    let wd_two = wd_to_gaussian(&NeuronOutputs::new(0, v).unwrap()).unwrap();
    ensure((oracle - 0.535).abs() <= 0.01, format!("quadrature oracle {oracle}"))?;
    ensure((wd_two - 0.535).abs() <= 0.01, format!("two-point WD {wd_two}"))?;
    ensure((wd_two - oracle).abs() <= 0.01, format!("two-point WD {wd_two} vs oracle {oracle}"))?;
    Ok(format!(
        "normal WD {wd_normal:.4}, quantile-matched 0, two-point {wd_two:.4} (oracle {oracle:.4})"
    ))
}

fn c2_md_calibration() -> Check {
    let x = Matrix::from_rows(&[[0.0, 1.0, 2.0]]);
    let md = mapping_difficulty(&[1.0], &x, 100, &mut SeededRng::new(0)).unwrap();
    ensure(md == 2.0, format!("hand example MD {md} ≠ 2"))?;

    let mut worst = 0.0f64;
    for trial in 0..20u64 {
        let x = random(100 + trial, 6, 40);
        let w: Vec<f64> = random(200 + trial, 1, 6).row(0).to_vec();
        let base = mapping_difficulty(&w, &x, 500, &mut SeededRng::new(trial)).unwrap();
        for c in [-3.0, 0.25, 7.5] {
            let ws: Vec<f64> = w.iter().map(|v| v * c).collect();
            let a = mapping_difficulty(&ws, &x, 500, &mut SeededRng::new(trial)).unwrap();
            let b = mapping_difficulty(&w, &x.scale(c), 500, &mut SeededRng::new(trial)).unwrap();
            worst = worst.max((a - base).abs()).max((b - base).abs());
        }
    }
    ensure(worst <= 1e-9, format!("scale invariance off by {worst:e}"))?;
    Ok(format!("hand example MD = 2, scale invariance max |Δ| {worst:.1e}"))
}

/// Optimal brain surgeon with a fresh inverse of the surviving block at
/// every step.
fn naive_obs(w: &[f64], h: &Matrix, zeros: usize) -> Vec<f64> {
    let m = w.len();
    let mut w = w.to_vec();
    let mut alive: Vec<usize> = (0..m).collect();
    for _ in 0..zeros {
        let sub = Matrix::from_fn(alive.len(), alive.len(), |i, j| h.get(alive[i], alive[j]));
        let hinv = spx_core::numerics::spd_inverse(&sub).unwrap();
        let mut best = 0;
        let mut best_score = f64::INFINITY;
        for (k, &q) in alive.iter().enumerate() {
            let score = w[q] * w[q] / hinv.get(k, k);
            if score < best_score {
                best_score = score;
                best = k;
            }
        }
        let q = alive[best];
        let coef = w[q] / hinv.get(best, best);
        for (k, &p) in alive.iter().enumerate() {
            w[p] -= coef * hinv.get(k, best);
        }
        w[q] = 0.0;
        alive.remove(best);
    }
    w
}

fn c3_obs_oracle() -> Check {
    let mut worst = 0.0f64;
    let mut rng = SeededRng::new(3);
    for trial in 0..50 {
        let m = 2 + trial % 5;
        let a = Matrix::from_fn(m, m + 3, |_, _| rng.normal());
        let mut h = a.matmul(&a.transpose()).unwrap();
        for i in 0..m {
            h.set(i, i, h.get(i, i) + 0.1);
        }
        let w = Matrix::from_fn(1, m, |_, _| rng.normal());
        let spec = PruneSpec::unstructured([0.34, 0.5, 0.67][trial % 3]).with_block_size(1);
        let state = HessianState {
            h: h.clone(),
            sample_count: m + 3,
            damping_fraction: 0.0,
            lambda: 0.0,
        };
        let got = sparsegpt_prune(&w, &state, &spec).unwrap();
        let want = naive_obs(w.row(0), &h, spec.zeros_per_row(m));
        for (g, e) in got.row(0).iter().zip(&want) {
            worst = worst.max((g - e).abs());
        }
        ensure(worst <= 1e-6, format!("trial {trial}: {:?} vs {want:?}", got.row(0)))?;
    }

    let mut rng = SeededRng::new(33);
    for (trial, spec) in [
        PruneSpec::unstructured(0.5),
        PruneSpec::unstructured(0.75),
        PruneSpec::nm(2, 4),
        PruneSpec::unstructured(0.5).with_block_size(1),
    ]
    .into_iter()
    .enumerate()
    {
        let w = Matrix::from_fn(12, 32, |_, _| rng.normal());
        let state = HessianState {
            h: Matrix::identity(32).scale(2.5),
            sample_count: 1,
            damping_fraction: 0.0,
            lambda: 0.0,
        };
        let obs = sparsegpt_prune(&w, &state, &spec).unwrap();
        let mag = baseline_prune(&w, None, BaselineMethod::Magnitude, &spec).unwrap();
        ensure(obs == mag, format!("diagonal-H case {trial} differs from magnitude"))?;
    }
    Ok(format!("50 instances max |Δw| {worst:.1e}; diagonal H bitwise equal to magnitude"))
}

fn c4_structure() -> Check {
    let mut rows = 0;
    for (seed, spec) in [
        (1, PruneSpec::unstructured(0.5)),
        (2, PruneSpec::unstructured(0.7)),
        (3, PruneSpec::unstructured(0.9)),
        (4, PruneSpec::unstructured(0.33).with_block_size(7)),
        (5, PruneSpec::nm(2, 4)),
        (6, PruneSpec::nm(2, 4).with_block_size(1)),
    ] {
        let w = random(seed, 40, 64);
        let x = random(seed + 10, 64, 256);
        let h = accumulate_hessian(&x, DEFAULT_DAMPING).unwrap();
        let p = sparsegpt_prune(&w, &h, &spec).unwrap();
        let want = spec.zeros_per_row(64);
        for r in 0..p.rows() {
            let row = p.row(r);
            let zeros = row.iter().filter(|v| **v == 0.0).count();
            ensure(zeros == want, format!("{spec:?} row {r}: {zeros} zeros, want {want}"))?;
            if spec.pattern != spx_core::pruner::SparsityPattern::Unstructured {
                for (g, group) in row.chunks(4).enumerate() {
                    let z = group.iter().filter(|v| **v == 0.0).count();
                    ensure(z == 2, format!("row {r} group {g} has {z} zeros"))?;
                }
            }
            rows += 1;
        }
    }
    Ok(format!("{rows} rows with exact zero counts, every 2:4 group exact"))
}

fn c5_error_dominance() -> Check {
    // independent features, then features driven by a few shared factors
    let inputs: [(&str, fn(u64) -> Matrix); 2] = [
        ("iid", |t| random(3000 + t, 32, 128)),
        ("factor", |t| {
            let f = random(2000 + t, 32, 4).matmul(&random(4000 + t, 4, 128)).unwrap();
            f.add(&random(3000 + t, 32, 128).scale(0.5)).unwrap()
        }),
    ];
    let mut report = Vec::new();
    for (name, gen) in inputs {
        let mut wins = 0;
        for trial in 0..100u64 {
            let w = random(1000 + trial, 8, 32);
            let x = gen(trial);
            let h = accumulate_hessian(&x, DEFAULT_DAMPING).unwrap();
            let spec = PruneSpec::unstructured(0.5);
            let obs = sparsegpt_prune(&w, &h, &spec).unwrap();
            let mag = baseline_prune(&w, None, BaselineMethod::Magnitude, &spec).unwrap();
            let err = |p: &Matrix| w.sub(p).unwrap().matmul(&x).unwrap().frobenius_norm();
            if err(&obs) <= err(&mag) {
                wins += 1;
            }
        }
        ensure(wins >= 90, format!("{name} inputs: sparsegpt ≤ magnitude on {wins}/100"))?;
        report.push(format!("{wins}/100 ({name} inputs)"));
    }
    Ok(format!("sparsegpt ≤ magnitude on {}", report.join(", ")))
}

fn c6_pipeline_identities() -> Check {
    let spec = SynthSpec {
        d: 16,
        d_ff: 64,
        samples: 1024,
        planted_count: 2,
        n_clusters_true: 4,
        shared_dims: 8,
        ..SynthSpec::default()
    };
    let p = gen_planted_model(&spec).map_err(|e| e.to_string())?;
    let x = &p.calibration.data;
    for s in [0.5, 0.9] {
        let seq = prune_model_sequential(
            &p.model,
            x,
            &SequentialPruneOptions::sparsegpt(PruneSpec::unstructured(s)),
            None,
        )
        .unwrap();
        let exp = expand_model(&p.model, x, &ExpansionConfig::new(PruneSpec::unstructured(s), 1, 9)).unwrap();
        for id in p.model.layer_ids() {
            ensure(
                exp.layer(id).experts[0] == seq.layer(id).weight,
                format!("c=1 expert of {id} differs at sparsity {s}"),
            )?;
        }
        ensure(exp.forward(x).unwrap() == seq.forward(x).unwrap(), "c=1 outputs differ")?;
    }
    let dense = p.model.forward(x).unwrap();
    for c in [1, 4] {
        let exp = expand_model(&p.model, x, &ExpansionConfig::new(PruneSpec::unstructured(0.0), c, 9)).unwrap();
        ensure(exp.forward(x).unwrap() == dense, format!("zero-sparsity c={c} differs from dense"))?;
    }
    Ok("c=1 experts bitwise equal to sequential sparsegpt; zero sparsity reproduces dense".into())
}

fn c12_quantizer() -> Check {
    let mut rng = SeededRng::new(12);
    let mut checked = 0usize;
    for trial in 0..100 {
        let rows = 4 + trial % 5;
        let cols = 16 + 8 * (trial % 7);
        let w = Matrix::from_fn(rows, cols, |_, _| {
            if rng.uniform() < 0.6 {
                0.0
            } else {
                rng.normal() * 3.0
            }
        });
        for bits in [3u8, 4] {
            let group = [4, 8, 16][trial % 3];
            let q = rtn_quantize(&w, bits, group).unwrap();
            for r in 0..rows {
                for c in 0..cols {
                    let (a, b) = (w.get(r, c), q.values.get(r, c));
                    let scale = q.scales.get(r, c / group);
                    ensure(a != 0.0 || b == 0.0, format!("zero at ({r},{c}) became {b}"))?;
                    ensure(
                        (a - b).abs() <= scale / 2.0,
                        format!("|Δ| {} > scale/2 {} at ({r},{c}), {bits} bits", (a - b).abs(), scale / 2.0),
                    )?;
                    checked += 1;
                }
            }
        }
    }
    Ok(format!("{checked} elements within scale/2, zeros preserved"))
}

// ---------------------------------------------------------------------------
// 7-11: planted synthetic model

fn c7_planted_recovery() -> Check {
    let p = planted();
    let inputs = p.planted.model.layer_inputs(&p.planted.calibration.data).unwrap();
    let mut recovered = 0;
    let mut total = 0;
    let mut ratios = Vec::new();
    for (block, planted) in p.planted.planted.iter().enumerate() {
        let id = LayerId::up(block);
        let y = p.planted.model.layer(id).weight.matmul(&inputs[id.ordinal()].1).unwrap();
        let report = WdReport::from_outputs(id.to_string(), &y).unwrap();
        let fraction = planted.len() as f64 / y.rows() as f64;
        let selected = select_wasserstein_neurons(&report, fraction).unwrap();
        recovered += planted.iter().filter(|i| selected.contains(i)).count();
        total += planted.len();
        let (pl, rest): (Vec<_>, Vec<_>) = (0..y.rows()).partition(|i| planted.contains(i));
        let med = |idx: &[usize]| median(idx.iter().map(|&i| report.wd[i]).collect());
        ratios.push(med(&pl) / med(&rest));
    }
    let recall = recovered as f64 / total as f64;
    ensure(recall >= 0.95, format!("recovered {recovered}/{total}"))?;
    let worst = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    ensure(worst >= 3.0, format!("planted/non-planted median WD ratio {ratios:?}"))?;
    Ok(format!("recovered {recovered}/{total}, median WD ratio ≥ {worst:.2}"))
}

fn c8_targeted_ablation() -> Check {
    let p = planted();
    let fraction = p.planted.planted[0].len() as f64 / p.planted.model.blocks[0].up.out_dim() as f64;
    let cfg = AblationConfig {
        fraction,
        sparsities: vec![HIGH_SPARSITY],
        scope: LayerScope::Up,
        random_draws: 5,
        ..AblationConfig::default()
    };
    let rows = targeted_ablation(
        &p.planted.model,
        &p.planted.calibration.data,
        &[AblationSelector::Wd, AblationSelector::Random],
        &cfg,
    )
    .unwrap();
    let (wd, rnd) = (rows[0].mse, rows[1].mse);
    ensure(rows.iter().all(|r| r.error.is_none()), format!("{rows:?}"))?;
    ensure(wd >= 2.0 * rnd, format!("WD-selected MSE {wd} < 2 × random {rnd}"))?;
    Ok(format!("MSE top-WD {wd:.4} vs random (median of 5) {rnd:.4}, ratio {:.1}", wd / rnd))
}

fn c9_disentanglement() -> Check {
    let p = planted();
    let medians: Vec<f64> = CLUSTER_GRID
        .iter()
        .map(|c| p.by_clusters[c].median_ri().unwrap_or(f64::NAN))
        .collect();
    for w in medians.windows(2) {
        ensure(w[1] >= w[0], format!("median RI over c {CLUSTER_GRID:?} not non-decreasing: {medians:?}"))?;
    }
    let ev = &p.by_clusters[&16];
    let improved = ev.fraction_improved();
    ensure(improved >= 0.95, format!("only {improved} of neurons have RI ≥ 1"))?;
    let planted = &p.planted.planted[0];
    let dis = planted
        .iter()
        .filter(|&&i| ev.records[i].weighted_cluster_wd < ev.records[i].dense_wd)
        .count();
    let frac = dis as f64 / planted.len() as f64;
    ensure(frac >= 0.9, format!("{dis}/{} planted neurons disentangled", planted.len()))?;
    Ok(format!(
        "RI ≥ 1 for {:.1}% at c=16; median RI {medians:.3?}; {dis}/{} planted disentangled",
        100.0 * improved,
        planted.len()
    ))
}

fn c10_predictor_ranking() -> Check {
    let ev = &planted().by_clusters[&16];
    let recs: Vec<_> = ev.records.iter().filter(|r| r.ri.is_finite()).collect();
    let ri: Vec<f64> = recs.iter().map(|r| r.ri).collect();
    let corr = |f: &dyn Fn(&spx_core::evalreport::NeuronEvalRecord) -> f64| {
        pearson(&recs.iter().map(|r| f(r)).collect::<Vec<_>>(), &ri).unwrap_or(f64::NAN)
    };
    let wd = corr(&|r| r.dense_wd);
    let mean = corr(&|r| r.mean_abs);
    let var = corr(&|r| r.variance);
    ensure(wd > mean && wd > var, format!("corr wd {wd}, |mean| {mean}, variance {var}"))?;
    Ok(format!("corr with RI: wd {wd:.3}, |mean| {mean:.3}, variance {var:.3}"))
}

fn c11_shrinkage() -> Check {
    let mut rng = SeededRng::new(11);
    let w = Matrix::from_fn(64, 128, |_, _| rng.normal());
    let x = Matrix::from_fn(128, 1000, |_, _| rng.normal());
    let mut ratios = Vec::new();
    for s in [0.5, 0.7, 0.9] {
        let r = random_mask_variance_ratio(&w, &x, s, &mut rng).unwrap();
        let lo = (1.0 - s) * 0.8;
        let hi = (1.0 - s) * 1.2;
        ensure(r > lo && r < hi, format!("variance ratio {r} at s={s} outside ({lo}, {hi})"))?;
        ratios.push(r);
    }
    let p = planted();
    let w0 = &p.planted.model.layer(LayerId::up(0)).weight;
    let curve = normality_curve(w0, &p.x_fit, &p.x_hold, &p.planted.planted[0], &[0.5, 0.7, 0.9], DEFAULT_DAMPING)
        .unwrap();
    for pair in curve.windows(2) {
        ensure(pair[1] <= pair[0] * 1.05, format!("planted WD over sparsity not non-increasing: {curve:?}"))?;
    }
    Ok(format!("variance ratios {ratios:.3?}; planted median WD {curve:.3?}"))
}

// ---------------------------------------------------------------------------
// 13: CLI determinism and bench

fn spx(args: &[&str], threads: usize) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_spx"))
        .args(args)
        .env("SPX_THREADS", threads.to_string())
        .output()
        .expect("spawn spx")
}

fn files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Summaries echo the thread count and output location; everything else
/// must match.
fn normalized_summary(bytes: &[u8]) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_slice(bytes).unwrap();
    let cfg = v["config"].as_object_mut().unwrap();
    cfg.remove("thread_count");
    cfg.remove("output_dir");
    v
}

fn same_artifacts(a: &Path, b: &Path) -> Result<usize, String> {
    let (fa, fb) = (files(a), files(b));
    ensure(
        fa.keys().eq(fb.keys()),
        format!("file sets differ: {:?} vs {:?}", fa.keys(), fb.keys()),
    )?;
    for (name, bytes) in &fa {
        let other = &fb[name];
        let equal = if name.file_name().is_some_and(|n| n == "summary.json") {
            normalized_summary(bytes) == normalized_summary(other)
        } else {
            bytes == other
        };
        ensure(equal, format!("{} differs", name.display()))?;
    }
    Ok(fa.len())
}

fn c13_determinism() -> Check {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let config = root.join("config.json");
    std::fs::write(
        &config,
        r#"{"synth": {"d": 24, "d_ff": 96, "samples": 1536, "planted_count": 3, "n_clusters_true": 4, "shared_dims": 8},
            "pair_budget": 2000, "sparsity": 0.8, "clusters": 4}"#,
    )
    .unwrap();
    let cfg = config.to_str().unwrap();
    let mut compared = 0;
    let mut run = |name: &str, extra: &[&str]| -> Result<(), String> {
        let mut dirs = Vec::new();
        for (threads, tag) in [(1, "a"), (4, "b"), (1, "c")] {
            let out = root.join(format!("{name}-{tag}"));
            let out_s = out.to_str().unwrap().to_string();
            let mut args = vec!["--config", cfg, "--seed", "7", "-o", &out_s];
            args.extend_from_slice(extra);
            let o = spx(&args, threads);
            ensure(
                o.status.success(),
                format!("{name} failed: {}", String::from_utf8_lossy(&o.stderr)),
            )?;
            dirs.push(out);
        }
        compared += same_artifacts(&dirs[0], &dirs[1])?;
        compared += same_artifacts(&dirs[0], &dirs[2])?;
        Ok(())
    };
    run("synth", &["synth"])?;
    let model = root.join("synth-a/model");
    let data = root.join("synth-a/calibration.spxt");
    let (m, d) = (model.to_str().unwrap(), data.to_str().unwrap());
    run("analyze", &["--model", m, "--data", d, "analyze"])?;
    run("prune", &["--model", m, "--data", d, "prune"])?;
    run("keep", &["--model", m, "--data", d, "prune", "--method", "keep-dense", "--keep-fraction", "0.05"])?;
    run("expand", &["--model", m, "--data", d, "expand"])?;
    run("sweep", &["--model", m, "--data", d, "eval", "--axis", "clusters", "--grid", "1,4"])?;
    run("ablation", &["--model", m, "--data", d, "eval", "--mode", "ablation", "--random-draws", "2"])?;

    // c=1 expansion writes the same tensors as sequential pruning
    let out = root.join("expand-c1");
    let o = spx(&["--config", cfg, "--seed", "7", "-o", out.to_str().unwrap(), "--model", m, "--data", d, "--clusters", "1", "expand"], 2);
    ensure(o.status.success(), String::from_utf8_lossy(&o.stderr).to_string())?;
    for l in ["b0.up", "b0.down", "b1.up", "b1.down"] {
        let e = std::fs::read(out.join(format!("model/{l}.expert0.spxt"))).unwrap();
        let p = std::fs::read(root.join(format!("prune-a/model/{l}.weight.spxt"))).unwrap();
        ensure(e == p, format!("c=1 expert {l} differs from pruned tensor"))?;
    }

    // bench: exact MAC counts, stable medians
    let out = root.join("bench");
    let o = spx(
        &["-o", out.to_str().unwrap(), "bench", "--sizes", "256x1024,512x512", "--bench-sparsity", "0.9", "--reps", "40", "--warmup", "5"],
        1,
    );
    ensure(o.status.success(), String::from_utf8_lossy(&o.stderr).to_string())?;
    let s: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("summary.json")).unwrap()).unwrap();
    let mut worst_cv = 0.0f64;
    for row in s["result"]["rows"].as_array().unwrap() {
        let (r, c) = (row["rows"].as_u64().unwrap(), row["cols"].as_u64().unwrap());
        let macs = row["macs"].as_u64().unwrap();
        let want = match row["format"].as_str().unwrap() {
            "dense" => r * c,
            "csr" => r * (c - (0.9 * c as f64 + 1e-9).floor() as u64),
            _ => r * c / 2,
        };
        ensure(macs == want, format!("MAC count {macs} ≠ {want} for {row}"))?;
        worst_cv = worst_cv.max(row["cv_across_repetitions"].as_f64().unwrap());
    }
    ensure(worst_cv <= 0.15, format!("latency CV {worst_cv} > 15%"))?;
    Ok(format!(
        "{compared} artifacts identical across threads 1/4 and reruns; c=1 tensors match; bench MACs exact, worst CV {:.1}%",
        100.0 * worst_cv
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Check); 13] = [
        ("1 WD calibration", c1_wd_calibration),
        ("2 MD calibration", c2_md_calibration),
        ("3 OBS oracle", c3_obs_oracle),
        ("4 structural sparsity", c4_structure),
        ("5 error dominance", c5_error_dominance),
        ("6 pipeline identities", c6_pipeline_identities),
        ("7 planted-neuron recovery", c7_planted_recovery),
        ("8 targeted ablation", c8_targeted_ablation),
        ("9 disentanglement", c9_disentanglement),
        ("10 predictor ranking", c10_predictor_ranking),
        ("11 shrinkage", c11_shrinkage),
        ("12 quantizer bound", c12_quantizer),
        ("13 determinism and bench", c13_determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let t = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|e| {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panic".into());
                Err(format!("panicked: {msg}"))
            });
        let secs = t.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS criterion {name}: {detail} [{secs:.1}s]"),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {name}: {why} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
