use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use spx_core::evalreport::{
    histogram, run_sweep, targeted_ablation, write_csv, write_histogram_csv, write_json,
    AblationConfig, EvalConfig, RecordOptions,
};
use spx_core::expansion::{
    count_dense_params, count_params, expand_model, load_dense_model, prune_model_sequential,
    save_dense_model, save_expanded_model, ExpansionConfig, LayerId, LayerPruner,
    SequentialPruneOptions, ToyModel,
};
use spx_core::metrics::{
    io_pairs, min_components_for_variance, top_fraction, GaussianReference, MetricsError,
    PairGeometry, WdReport,
};
use spx_core::numerics::{read_tensor, write_tensor, Matrix, SeededRng};
use spx_core::synth::gen_planted_model;

use crate::bench::{bench_matvec, BenchRow};
use crate::config::{parse_layer, EvalMode, PruneMethod, RunConfig};
use crate::error::CliError;

/// What a successful command reports, plus where its summary goes.
pub struct Outcome {
    pub summary_dir: PathBuf,
    pub result: Value,
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> Value {
    serde_json::to_value(value).expect("report types serialize")
}

fn load_inputs(cfg: &RunConfig) -> Result<(ToyModel, Matrix), CliError> {
    let model_dir = cfg
        .model_dir
        .as_ref()
        .ok_or_else(|| CliError::Config("--model is required".into()))?;
    let data = cfg
        .data_path
        .as_ref()
        .ok_or_else(|| CliError::Config("--data is required".into()))?;
    for p in [model_dir.join("model.json"), data.clone()] {
        if !p.exists() {
            return Err(CliError::io(p, "no such file"));
        }
    }
    let model = load_dense_model(model_dir)?;
    let x = read_tensor(data)?;
    if x.rows() != model.input_dim() {
        return Err(CliError::Config(format!(
            "calibration has {} features, model expects {}",
            x.rows(),
            model.input_dim()
        )));
    }
    Ok((model, x))
}

pub fn synth(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let mut spec = cfg.synth.clone();
    spec.seed = cfg.seed;
    let planted = gen_planted_model(&spec)?;
    let out = &cfg.output_dir;
    create_dir(out)?;
    save_dense_model(&planted.model, &out.join("model"))?;
    let data_path = out.join("calibration.spxt");
    write_tensor(&planted.calibration.data, &data_path)?;
    write_json(out.join("labels.json"), &planted.calibration.labels)?;
    write_json(
        out.join("planted.json"),
        &json!({ "planted": planted.planted, "planted_wd": planted.planted_wd }),
    )?;
    Ok(Outcome {
        summary_dir: out.clone(),
        result: json!({
            "model_dir": "model",
            "data_path": "calibration.spxt",
            "input_dim": planted.model.input_dim(),
            "samples": planted.calibration.data.cols(),
            "blocks": planted.model.blocks.len(),
            "planted": planted.planted,
            "dense_params": planted.model.dense_param_count(),
        }),
    })
}

#[derive(Serialize)]
struct NeuronRow {
    neuron_index: usize,
    wd: f64,
    md: f64,
    mean: f64,
    variance: f64,
}

fn analyze_layer(
    cfg: &RunConfig,
    id: LayerId,
    w: &Matrix,
    x: &Matrix,
    out: &Path,
) -> Result<Value, CliError> {
    let y = w.matmul(x)?;
    let reference = GaussianReference::new(y.cols())?;
    let rng = SeededRng::new(cfg.seed).child(id.ordinal() as u64);
    let geometry = match PairGeometry::new(x, cfg.pair_budget, &mut rng.child(0)) {
        Ok(g) => Some(g),
        Err(MetricsError::DegeneratePairs) => None,
        Err(e) => return Err(e.into()),
    };
    let rows: Vec<NeuronRow> = (0..y.rows())
        .into_par_iter()
        .map(|r| {
            let v = y.row(r);
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            NeuronRow {
                neuron_index: r,
                wd: reference.wd(v).unwrap_or(f64::NAN),
                md: geometry
                    .as_ref()
                    .and_then(|g| g.mapping_difficulty(v).ok())
                    .unwrap_or(f64::NAN),
                mean,
                variance: v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n,
            }
        })
        .collect();
    let wd: Vec<f64> = rows.iter().map(|r| r.wd).collect();
    WdReport { layer: id.to_string(), wd: wd.clone() }.write_csv(out.join(format!("wd_{id}.csv")))?;
    write_csv(out.join(format!("neurons_{id}.csv")), &rows)?;

    let finite: Vec<f64> = wd.iter().copied().filter(|v| v.is_finite()).collect();
    if !finite.is_empty() {
        let bins = histogram(&finite, cfg.histogram_bins)?;
        write_histogram_csv(out.join(format!("hist_wd_{id}.csv")), &bins)?;
    }
    let scored: Vec<f64> = wd.iter().map(|v| if v.is_finite() { *v } else { f64::NEG_INFINITY }).collect();
    let selected = top_fraction(&scored, cfg.fraction)?;
    let top = (0..scored.len()).fold(0, |b, i| if scored[i] > scored[b] { i } else { b });
    let pairs = io_pairs(w.row(top), x, cfg.pair_budget, &mut rng.child(1))?;
    pairs.write_csv(out.join(format!("io_pairs_{id}.csv")))?;
    let components = min_components_for_variance(x, cfg.variance_threshold)?;
    Ok(json!({
        "layer": id.to_string(),
        "neurons": y.rows(),
        "selected": selected,
        "top_wd_neuron": top,
        "io_pairs_skipped": pairs.skipped,
        "input_components": components.k,
        "input_zero_variance": components.zero_variance,
    }))
}

pub fn analyze(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let (model, x) = load_inputs(cfg)?;
    let wanted = cfg.layer.as_deref().map(parse_layer).transpose()?;
    if let Some(id) = wanted {
        if id.block >= model.blocks.len() {
            return Err(CliError::Config(format!("layer {id} not in model")));
        }
    }
    let out = &cfg.output_dir;
    create_dir(out)?;
    let inputs = model.layer_inputs(&x)?;
    let mut layers = Vec::new();
    for (id, xi) in &inputs {
        if wanted.is_some_and(|w| w != *id) {
            continue;
        }
        layers.push(analyze_layer(cfg, *id, &model.layer(*id).weight, xi, out)?);
    }
    Ok(Outcome {
        summary_dir: out.clone(),
        result: json!({ "layers": layers }),
    })
}

pub fn prune(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let (model, x) = load_inputs(cfg)?;
    let method = match cfg.method {
        PruneMethod::Sparsegpt => LayerPruner::SparseGpt,
        PruneMethod::Magnitude => LayerPruner::Magnitude,
        PruneMethod::Wanda => LayerPruner::Wanda,
        PruneMethod::KeepDense => LayerPruner::KeepDense {
            keep_fraction: cfg.keep_fraction,
        },
    };
    let opts = SequentialPruneOptions {
        spec: cfg.prune_spec()?,
        method,
        scope: cfg.scope,
        damping: cfg.damping,
    };
    let pruned = prune_model_sequential(&model, &x, &opts, None)?;
    let out = &cfg.output_dir;
    create_dir(out)?;
    save_dense_model(&pruned, &out.join("model"))?;
    let mse = pruned.forward(&x)?.mse(&model.forward(&x)?)?;
    Ok(Outcome {
        summary_dir: out.clone(),
        result: json!({
            "model_dir": "model",
            "params": to_json(&count_dense_params(&pruned)),
            "dense_params": model.dense_param_count(),
            "calibration_mse": mse,
        }),
    })
}

pub fn expand(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let (model, x) = load_inputs(cfg)?;
    let mut ecfg = ExpansionConfig::new(cfg.prune_spec()?, cfg.clusters, cfg.seed);
    ecfg.build.damping = cfg.damping;
    ecfg.build.router.pca_dims = cfg.pca_dims;
    let expanded = expand_model(&model, &x, &ecfg)?;
    let out = &cfg.output_dir;
    create_dir(out)?;
    save_expanded_model(&expanded, &out.join("model"))?;
    let mse = expanded.forward(&x)?.mse(&model.forward(&x)?)?;
    let sizes: Vec<Value> = expanded
        .layer_ids()
        .into_iter()
        .map(|id| json!({ "layer": id.to_string(), "cluster_sizes": expanded.layer(id).provenance.cluster_sizes }))
        .collect();
    Ok(Outcome {
        summary_dir: out.clone(),
        result: json!({
            "model_dir": "model",
            "params": to_json(&count_params(&expanded)),
            "dense_params": model.dense_param_count(),
            "calibration_mse": mse,
            "layers": sizes,
        }),
    })
}

fn value_tag(v: f64) -> String {
    v.to_string()
}

pub fn eval(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let (model, x) = load_inputs(cfg)?;
    let run_dir = cfg.output_dir.join(format!("run-{}", &cfg.result_hash()[..16]));
    match cfg.eval_mode {
        EvalMode::Sweep => {
            let axis = cfg.sweep_axis()?;
            let ecfg = EvalConfig {
                sparsity: cfg.sparsity,
                clusters: cfg.clusters,
                quant_group: cfg.quant_group,
                damping: cfg.damping,
                holdout_fraction: cfg.holdout_fraction,
                seed: cfg.seed,
                record_layer: parse_layer(&cfg.record_layer)?,
                records: RecordOptions {
                    pair_budget: cfg.pair_budget,
                    ..RecordOptions::default()
                },
            };
            let report = run_sweep(&model, &x, &axis, &ecfg)?;
            create_dir(&run_dir)?;
            write_csv(run_dir.join("report.csv"), &report.rows)?;
            let mut points = Vec::new();
            for (row, layer) in report.rows.iter().zip(&report.layers) {
                let Some(layer) = layer else { continue };
                let tag = format!("{}_{}", axis.name(), value_tag(row.value));
                write_csv(run_dir.join(format!("neurons_{tag}.csv")), &layer.records)?;
                let ri: Vec<f64> = layer.ri().into_iter().filter(|v| v.is_finite()).collect();
                if !ri.is_empty() {
                    write_histogram_csv(
                        run_dir.join(format!("hist_ri_{tag}.csv")),
                        &histogram(&ri, cfg.histogram_bins)?,
                    )?;
                }
                points.push(json!({
                    "value": row.value,
                    "holdout_cluster_sizes": layer.holdout_cluster_sizes,
                }));
            }
            let failed = report.rows.iter().filter(|r| r.error.is_some()).count();
            Ok(Outcome {
                summary_dir: run_dir.clone(),
                result: json!({
                    "mode": "sweep",
                    "axis": axis.name(),
                    "run_dir": run_dir.file_name().map(|n| n.to_string_lossy().into_owned()),
                    "quality_metric": "held-out output MSE against the dense model",
                    "rows": to_json(&report.rows),
                    "points": points,
                    "failed_points": failed,
                }),
            })
        }
        EvalMode::Ablation => {
            let acfg = AblationConfig {
                fraction: cfg.fraction,
                sparsities: cfg.ablation_sparsities.clone(),
                scope: cfg.scope,
                random_draws: cfg.random_draws,
                holdout_fraction: cfg.holdout_fraction,
                damping: cfg.damping,
                seed: cfg.seed,
            };
            let rows = targeted_ablation(&model, &x, &cfg.selectors, &acfg)?;
            create_dir(&run_dir)?;
            write_csv(run_dir.join("report.csv"), &rows)?;
            Ok(Outcome {
                summary_dir: run_dir.clone(),
                result: json!({
                    "mode": "ablation",
                    "run_dir": run_dir.file_name().map(|n| n.to_string_lossy().into_owned()),
                    "quality_metric": "held-out output MSE against the dense model",
                    "rows": to_json(&rows),
                }),
            })
        }
    }
}

pub fn bench(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let mut bcfg = cfg.bench.clone();
    bcfg.seed = cfg.seed;
    let rows: Vec<BenchRow> = bench_matvec(&bcfg)?;
    let out = &cfg.output_dir;
    create_dir(out)?;
    write_csv(out.join("bench.csv"), &flatten_bench(&rows))?;
    Ok(Outcome {
        summary_dir: out.clone(),
        result: json!({ "threads": 1, "rows": to_json(&rows) }),
    })
}

/// CSV cannot hold the `(rows, cols)` tuple, so the row is flattened.
#[derive(Serialize)]
struct BenchCsvRow {
    rows: usize,
    cols: usize,
    format: String,
    sparsity: f64,
    nnz: usize,
    macs: usize,
    reps_per_round: usize,
    median_ns: f64,
    q1_ns: f64,
    q3_ns: f64,
    iqr_ns: f64,
    cv_across_repetitions: f64,
}

fn flatten_bench(rows: &[BenchRow]) -> Vec<BenchCsvRow> {
    rows.iter()
        .map(|r| BenchCsvRow {
            rows: r.rows,
            cols: r.cols,
            format: r.format.to_string(),
            sparsity: r.sparsity,
            nnz: r.nnz,
            macs: r.macs,
            reps_per_round: r.reps_per_round,
            median_ns: r.median_ns,
            q1_ns: r.q1_ns,
            q3_ns: r.q3_ns,
            iqr_ns: r.iqr_ns,
            cv_across_repetitions: r.cv_across_repetitions,
        })
        .collect()
}

/// `summary.json` for a finished or failed run. Holds no timestamps, so a
/// rerun reproduces it byte for byte.
pub fn write_summary(
    dir: &Path,
    cfg: &RunConfig,
    result: Result<&Value, &CliError>,
) -> Result<(), CliError> {
    create_dir(dir)?;
    let body = match result {
        Ok(v) => json!({
            "status": "ok",
            "command": cfg.command,
            "seed": cfg.seed,
            "config": to_json(cfg),
            "result": v,
        }),
        Err(e) => json!({
            "status": "error",
            "command": cfg.command,
            "seed": cfg.seed,
            "config": to_json(cfg),
            "error": {
                "kind": e.kind(),
                "exit_code": e.kind().exit_code(),
                "message": e.to_string(),
            },
        }),
    };
    let path = dir.join("summary.json");
    let text = serde_json::to_string_pretty(&body).expect("summary serializes") + "\n";
    write_text(&path, &text)
}
