use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use xmodal::baseline::{evaluate_forest, feature_matrix};
use xmodal::encoder::{EncoderConfig, EncoderWeights};
use xmodal::evalkit::{
    fold_metrics, format_table, make_kfold_splits, make_loso_splits, Metric, MetricReport, SplitPlan,
};
use xmodal::extract::{
    cache_key, checkpoint_fingerprint, extract_embeddings, manifest_fingerprint, EmbeddingCache, ExtractOptions,
};
use xmodal::filterscope::{analyze_filters, responses_csv, responses_svg};
use xmodal::ingest::{load_manifest, prepare, DatasetManifest, EvalScheme, Preprocess};
use xmodal::lora::{predict_adapted, train_adapters, AdapterBundle, LoraConfig, LoraTask};
use xmodal::numkit::Tensor;
use xmodal::weight_io::{checkpoint_provenance, load_checkpoint, verify_parity, weights_checksum, ParityFixture};

use crate::config::{LoraLayerMode, RunConfig};
use crate::error::{Class, CliError};

const CACHE_ENV: &str = "XMODAL_CACHE_DIR";

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("artifact serializes");
    text.push('\n');
    write_text(path, &text)
}

fn manifest(c: &RunConfig) -> Result<DatasetManifest, CliError> {
    Ok(load_manifest(c.require_manifest()?)?)
}

fn checkpoint(c: &RunConfig) -> Result<(EncoderConfig, EncoderWeights<f32>), CliError> {
    Ok(load_checkpoint(c.require_checkpoint()?)?)
}

fn preprocess(c: &RunConfig, m: &DatasetManifest) -> Preprocess {
    let mut p = m.preprocess.clone();
    if let Some(s) = c.channel_strategy {
        p.channel_strategy = s;
    }
    p
}

fn check_layers(layers: &[usize], max: usize) -> Result<(), CliError> {
    match layers.iter().find(|&&l| l > max) {
        Some(bad) => Err(CliError::validation(format!("layer {bad} outside 0..={max}"))),
        None => Ok(()),
    }
}

fn split_plan(c: &RunConfig, fallback: Option<EvalScheme>, labels: &[usize], subjects: &[String]) -> Result<SplitPlan, CliError> {
    let scheme = c.scheme.or(fallback).unwrap_or(EvalScheme::Kfold { k: 5 });
    Ok(match scheme {
        EvalScheme::Loso => make_loso_splits(subjects)?,
        EvalScheme::Kfold { k } => make_kfold_splits(labels, k, c.split_seed)?,
    })
}

fn n_classes(m: Option<&DatasetManifest>, labels: &[usize]) -> usize {
    m.map_or_else(|| labels.iter().max().map_or(0, |&y| y + 1), |m| m.labels.len())
}

/// Extracts (or resumes) the embedding cache; fails if any record failed.
fn build_cache(c: &RunConfig, m: &DatasetManifest, layers: &[usize]) -> Result<(EmbeddingCache, PathBuf), CliError> {
    let (config, weights) = checkpoint(c)?;
    check_layers(layers, config.n_layers)?;
    let layers: BTreeSet<usize> = if layers.is_empty() {
        (0..=config.n_layers).collect()
    } else {
        layers.iter().copied().collect()
    };
    let options = ExtractOptions {
        layers,
        pooling: c.pooling,
        preprocess: preprocess(c, m),
    };
    let path = match &c.cache {
        Some(p) => p.clone(),
        None => {
            let key = cache_key(&manifest_fingerprint(m)?, &checkpoint_fingerprint(&config, &weights), &options);
            let dir = std::env::var_os(CACHE_ENV).map_or_else(|| c.out_dir(), PathBuf::from);
            dir.join(format!("{}-{key}.xmc", m.name))
        }
    };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let (cache, report) = extract_embeddings(m, &config, &weights, &options, Some(&path))?;
    eprintln!("{}", report.summary());
    write_json(
        &c.out_dir().join("extract_report.json"),
        &json!({
            "config": c.echo(),
            "cache": path,
            "computed": report.computed,
            "cached": report.cached,
            "failed": report.failed.iter().map(|f| json!({"record": f.record, "reason": f.reason})).collect::<Vec<_>>(),
        }),
    )?;
    if !report.succeeded() {
        let lines: Vec<String> = report
            .failed
            .iter()
            .map(|f| format!("  record {}: {}", f.record, f.reason))
            .collect();
        return Err(CliError::runtime(format!(
            "{} records failed (partial cache kept at {}):\n{}",
            report.failed.len(),
            path.display(),
            lines.join("\n")
        )));
    }
    Ok((cache, path))
}

pub fn extract(c: &RunConfig) -> Result<(), CliError> {
    let m = manifest(c)?;
    let (_, path) = build_cache(c, &m, &c.layers)?;
    println!("cache: {}", path.display());
    Ok(())
}

pub fn evaluate(c: &RunConfig) -> Result<(), CliError> {
    let (cache, m) = if c.manifest.is_some() && c.checkpoint.is_some() {
        let m = manifest(c)?;
        (build_cache(c, &m, &c.layers)?.0, Some(m))
    } else if let Some(p) = &c.cache {
        (EmbeddingCache::load(p)?, c.manifest.as_ref().map(|_| manifest(c)).transpose()?)
    } else {
        return Err(CliError::validation("evaluate needs --manifest and --checkpoint, or --cache"));
    };
    let available = cache.layers();
    let layers: Vec<usize> = if !c.layers.is_empty() {
        if let Some(bad) = c.layers.iter().find(|l| !available.contains(l)) {
            return Err(CliError::validation(format!("layer {bad} not in cache (cached: {available:?})")));
        }
        c.layers.clone()
    } else if c.command == "sweep" {
        available
    } else {
        available.last().copied().into_iter().collect()
    };
    let labels = cache.labels();
    let classes = n_classes(m.as_ref(), &labels);
    let plan = split_plan(c, m.as_ref().map(|m| m.eval_scheme), &labels, &cache.subjects())?;
    let sweep = xmodal::evalkit::run_layer_sweep(
        &cache,
        &layers,
        classes,
        &plan,
        c.probe,
        &c.train,
        c.standardize,
        c.echo(),
    )?;

    let out = c.out_dir();
    write_text(&out.join("report.json"), &(sweep.to_json() + "\n"))?;
    write_text(&out.join("sweep.csv"), &sweep.to_csv(c.metric))?;
    let rows: Vec<(String, &MetricReport)> = sweep.layers.iter().map(|(l, r)| (format!("layer {l}"), r)).collect();
    let table = format_table(&rows, &[Metric::MacroF1, Metric::Accuracy, Metric::Auc]);
    write_text(&out.join("table.txt"), &table)?;
    print!("{table}");
    if !sweep.errors.is_empty() {
        for e in &sweep.errors {
            eprintln!("layer {} fold {}: {}", e.layer, e.fold, e.message);
        }
        let class = if sweep.errors.iter().any(|e| e.diverged) {
            Class::Divergence
        } else {
            Class::Runtime
        };
        return Err(CliError {
            class,
            message: format!("{} (layer, fold) cells failed", sweep.errors.len()),
        });
    }
    Ok(())
}

pub fn baseline(c: &RunConfig) -> Result<(), CliError> {
    let m = manifest(c)?;
    let x = feature_matrix(&m)?;
    let labels = m.labels();
    let plan = split_plan(c, Some(m.eval_scheme), &labels, &m.subjects())?;
    let report = evaluate_forest(&x, &labels, m.labels.len(), &plan, &c.forest, c.echo())?;
    write_text(&c.out_dir().join("baseline_report.json"), &(report.to_json() + "\n"))?;
    let table = format_table(
        &[("random forest".to_string(), &report)],
        &[Metric::MacroF1, Metric::Accuracy, Metric::Auc],
    );
    print!("{table}");
    Ok(())
}

#[derive(Serialize)]
struct LoraRun {
    name: String,
    adapted_layers: Vec<usize>,
    probe_layer: usize,
    adapter_parameters: usize,
    initial_loss: f64,
    final_loss: Option<f64>,
    train_loss: Vec<f64>,
    note: Option<String>,
    cv: Option<MetricReport>,
    bundle: String,
}

fn lora_runs(c: &RunConfig, config: &EncoderConfig) -> Result<Vec<(String, LoraConfig)>, CliError> {
    c.lora.validate(config)?;
    Ok(match c.lora_layers {
        LoraLayerMode::All => vec![("all".to_string(), c.lora.clone())],
        LoraLayerMode::OneAtATime => c
            .lora
            .target_layers(config)
            .into_iter()
            .map(|l| {
                let cfg = LoraConfig {
                    layers: vec![l],
                    probe_layer: Some(l),
                    ..c.lora.clone()
                };
                (format!("layer{l}"), cfg)
            })
            .collect(),
    })
}

pub fn train_lora(c: &RunConfig) -> Result<(), CliError> {
    let m = manifest(c)?;
    let (config, weights) = checkpoint(c)?;
    let runs = lora_runs(c, &config)?;
    let weights = weights.cast::<f64>();
    let pre = preprocess(c, &m);
    let waves: Vec<Vec<Vec<f64>>> = (0..m.len())
        .into_par_iter()
        .map(|i| Ok(prepare(&m.load_window(i)?, &pre)))
        .collect::<Result<_, xmodal::ingest::IngestError>>()?;
    let labels = m.labels();
    let classes = m.labels.len();
    let plan = if c.lora_cv {
        Some(split_plan(c, Some(m.eval_scheme), &labels, &m.subjects())?)
    } else {
        None
    };
    let out = c.out_dir();
    let mut summaries = Vec::new();
    for (name, lora) in runs {
        let task = LoraTask {
            waves: &waves,
            labels: &labels,
            n_classes: classes,
        };
        let trained = train_adapters(&task, &config, &weights, &lora, c.probe)?;
        let probe_layer = lora.resolved_probe_layer(&config);
        let cv = match &plan {
            Some(plan) => Some(lora_cv(c, plan, &waves, &labels, classes, &config, &weights, &lora)?),
            None => None,
        };
        let bundle_path = out.join(format!("lora_{name}.xmc"));
        let echo = json!({ "run": name, "config": c.echo() });
        let summary = LoraRun {
            name: name.clone(),
            adapted_layers: lora.target_layers(&config).into_iter().collect(),
            probe_layer,
            adapter_parameters: trained.adapters.parameter_count(),
            initial_loss: trained.initial_loss,
            final_loss: trained.curve.train.last().copied(),
            train_loss: trained.curve.train.clone(),
            note: (lora.train.epochs == 0).then(|| {
                "0 epochs: adapters equal their initialization (B = 0); outputs match the frozen encoder".to_string()
            }),
            cv,
            bundle: bundle_path.display().to_string(),
        };
        std::fs::create_dir_all(&out)?;
        AdapterBundle {
            config: echo,
            trained,
        }
        .save(&bundle_path)?;
        println!(
            "{name}: probe layer {probe_layer}, {} adapter params, loss {:.4} -> {}",
            summary.adapter_parameters,
            summary.initial_loss,
            summary.final_loss.map_or("n/a".to_string(), |l| format!("{l:.4}"))
        );
        if let Some(cv) = &summary.cv {
            println!("  cv macro-F1 {}", cv.macro_f1.display());
        }
        summaries.push(summary);
    }
    write_json(
        &out.join("lora_report.json"),
        &json!({ "config": c.echo(), "runs": summaries }),
    )?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn lora_cv(
    c: &RunConfig,
    plan: &SplitPlan,
    waves: &[Vec<Vec<f64>>],
    labels: &[usize],
    classes: usize,
    config: &EncoderConfig,
    weights: &EncoderWeights<f64>,
    lora: &LoraConfig,
) -> Result<MetricReport, CliError> {
    let mut folds = Vec::new();
    for (i, fold) in plan.folds.iter().enumerate() {
        let tw: Vec<Vec<Vec<f64>>> = fold.train.iter().map(|&r| waves[r].clone()).collect();
        let ty: Vec<usize> = fold.train.iter().map(|&r| labels[r]).collect();
        let task = LoraTask {
            waves: &tw,
            labels: &ty,
            n_classes: classes,
        };
        let trained = train_adapters(&task, config, weights, lora, c.probe)?;
        let layer = lora.resolved_probe_layer(config);
        let rows = fold
            .test
            .iter()
            .map(|&r| predict_adapted(&waves[r], config, weights, &trained, layer, lora.pooling))
            .collect::<Result<Vec<_>, _>>()?;
        let probs = Tensor::from_rows(&rows).map_err(|e| CliError::runtime(e.to_string()))?;
        folds.push(fold_metrics(i, fold, labels, classes, &probs)?);
    }
    MetricReport::from_folds(c.echo(), folds).ok_or_else(|| CliError::runtime("no folds evaluated"))
}

pub fn viz(c: &RunConfig) -> Result<(), CliError> {
    let (_, weights) = checkpoint(c)?;
    let conv0 = weights.get("conv.0.weight")?;
    let v = &c.viz;
    let reports = analyze_filters(conv0, v.top_k, v.filters.as_deref(), v.n_fft, &v.thresholds)?;
    let out = c.out_dir();
    write_text(&out.join("filters.csv"), &responses_csv(&reports))?;
    write_text(&out.join("filters.svg"), &responses_svg(&reports))?;
    write_json(&out.join("filters.json"), &json!({ "config": c.echo(), "filters": reports }))?;
    for r in &reports {
        println!("filter {:>3}  norm {:.4}  {}", r.filter, r.l2_norm, r.band.tag());
    }
    Ok(())
}

pub fn verify_checkpoint(c: &RunConfig) -> Result<(), CliError> {
    let path = c.require_checkpoint()?;
    let (config, weights) = load_checkpoint(path)?;
    println!("provenance: {}", checkpoint_provenance(path)?);
    println!(
        "layers {} d_model {} heads {} ffn {} conv stages {}",
        config.n_layers,
        config.d_model,
        config.n_heads,
        config.ffn_dim,
        config.conv_layers.len()
    );
    println!("parameters {}", weights.parameter_count());
    println!("checksum {}", weights_checksum(&weights));
    let Some(fx) = &c.fixture else { return Ok(()) };
    let fixture = ParityFixture::load(fx)?;
    let report = verify_parity(&config, &weights, &fixture)?;
    for l in &report.layers {
        println!("layer {:>2}  max |Δ| {:.3e}", l.layer, l.max_abs);
    }
    if c.out.is_some() {
        write_json(&c.out_dir().join("parity_report.json"), &report)?;
    }
    if !report.passed {
        return Err(CliError::runtime(format!(
            "parity failed: max deviation {:.3e} exceeds tolerance {:.1e}",
            report.max_deviation(),
            report.tolerance
        )));
    }
    println!("parity ok (tolerance {:.1e})", report.tolerance);
    Ok(())
}
