//! Acceptance suite: one PASS/FAIL line per criterion, failing the test if
//! any criterion fails. Run with `--nocapture` to see the lines.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use xmodal::baseline::{
    engineered_features, evaluate_forest, feature_matrix, train_forest, ForestConfig,
};
use xmodal::encoder::{
    base_conv_layers, frame_count, taped_attention, taped_block, EncoderConfig, EncoderWeights, TapedAdapters,
    TapedLora,
};
use xmodal::evalkit::{
    auc, auc_binary, macro_f1, make_kfold_splits, make_loso_splits, run_layer_sweep, EvalError, SweepReport,
};
use xmodal::extract::{extract_embeddings, ExtractOptions, Pooling};
use xmodal::filterscope::{
    analyze_filters, classify_response, frequency_response, parseval_gap, responses_csv, responses_svg, BandClass,
    BandThresholds,
};
use xmodal::ingest::{load_manifest, EvalScheme, WindowRecord};
use xmodal::lora::{adapted_forward, merge, LoraAdapter, Projection};
use xmodal::numkit::{self as nk, finite_difference_check, GradTape, Tensor, Var};
use xmodal::probe::{taped_logits, ProbeKind, TrainConfig};
use xmodal::synth::{write_toy_checkpoint, SinusoidTask};
use xmodal::weight_io::load_checkpoint;

type Check = Result<String, String>;

struct Outcome {
    name: &'static str,
    passed: bool,
    detail: String,
}

fn criterion(name: &'static str, limit: Option<Duration>, f: impl FnOnce() -> Check) -> Outcome {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f));
    let took = start.elapsed();
    let (mut passed, mut detail) = match result {
        Ok(Ok(d)) => (true, d),
        Ok(Err(d)) => (false, d),
        Err(p) => (
            false,
            p.downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()),
        ),
    };
    if let Some(limit) = limit {
        if took > limit {
            passed = false;
            detail = format!("{detail}; runtime {took:.2?} over {limit:?}");
        }
    }
    let line = format!(
        "{} {name}: {detail} [{:.2?}]",
        if passed { "PASS" } else { "FAIL" },
        took
    );
    // Written to the raw handle so the line survives test output capture.
    let _ = writeln!(std::io::stderr(), "{line}");
    Outcome { name, passed, detail }
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let normal = Normal::new(0.0, std).unwrap();
    let n = shape.iter().product::<usize>();
    let v: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::from_f64(shape, &v).unwrap()
}

// ---------------------------------------------------------------- frame count

fn frame_counts() -> Check {
    let conv = base_conv_layers();
    let got: Vec<usize> = [400, 1000, 16000].iter().map(|&l| frame_count(l, &conv)).collect();
    ensure(got == [1, 2, 49], || format!("got {got:?}"))?;
    Ok(format!("400->{} 1000->{} 16000->{}", got[0], got[1], got[2]))
}

// ------------------------------------------------------------ gradient suite

const H: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;

/// `sum(out ⊙ r)` for a fixed random `r`, so no coordinate has a trivially
/// zero gradient.
fn weighted_sum(tape: &mut GradTape<f64>, out: Var, seed: u64) -> nk::Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let r = random(&shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    let r = tape.constant(r);
    let p = tape.mul(out, r)?;
    Ok(tape.sum(p))
}

fn gradient_suite() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut record = |name: &'static str, err: f64| {
        let e = worst.entry(name).or_insert(0.0);
        *e = e.max(err);
    };

    // linear probe
    let x = random(&[6, 5], 1.0, &mut rng);
    let y = [0, 1, 2, 1, 0, 2];
    let w = random(&[3, 5], 0.5, &mut rng);
    let b = random(&[3], 0.1, &mut rng);
    let lin = |tape: &mut GradTape<f64>, w: Var, b: Var| -> nk::Result<Var> {
        let xv = tape.constant(x.clone());
        let z = taped_logits(tape, xv, &[(w, b)])?;
        tape.cross_entropy(z, &y, None)
    };
    record(
        "linear probe",
        finite_difference_check(|t, p| { let bv = t.constant(b.clone()); lin(t, p, bv) }, &w, H).unwrap(),
    );
    record(
        "linear probe",
        finite_difference_check(|t, p| { let wv = t.constant(w.clone()); lin(t, wv, p) }, &b, H).unwrap(),
    );

    // MLP probe, every parameter tensor
    let params = [
        random(&[7, 5], 0.5, &mut rng),
        random(&[7], 0.1, &mut rng),
        random(&[3, 7], 0.5, &mut rng),
        random(&[3], 0.1, &mut rng),
    ];
    let cw = [0.5, 2.0, 1.0];
    for which in 0..4 {
        let err = finite_difference_check(
            |t, p| {
                let vars: Vec<Var> = (0..4)
                    .map(|i| if i == which { p } else { t.constant(params[i].clone()) })
                    .collect();
                let xv = t.constant(x.clone());
                let z = taped_logits(t, xv, &[(vars[0], vars[1]), (vars[2], vars[3])])?;
                t.cross_entropy(z, &y, Some(&cw))
            },
            &params[which],
            H,
        )
        .unwrap();
        record("mlp probe", err);
    }

    // softmax cross-entropy on the logits, with and without class weights
    let logits = random(&[6, 3], 2.0, &mut rng);
    for weights in [None, Some(&cw[..])] {
        record(
            "softmax-cross-entropy",
            finite_difference_check(|t, p| t.cross_entropy(p, &y, weights), &logits, H).unwrap(),
        );
    }

    // layer norm: input, gain and bias
    let ln_x = random(&[4, 6], 1.5, &mut rng);
    let ln_g = random(&[6], 1.0, &mut rng);
    let ln_b = random(&[6], 0.3, &mut rng);
    let ln = [ln_x, ln_g, ln_b];
    for which in 0..3 {
        let err = finite_difference_check(
            |t, p| {
                let v: Vec<Var> = (0..3).map(|i| if i == which { p } else { t.constant(ln[i].clone()) }).collect();
                let out = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                weighted_sum(t, out, 1)
            },
            &ln[which],
            H,
        )
        .unwrap();
        record("layer_norm", err);
    }

    // attention and full blocks of a toy encoder
    let config = EncoderConfig::toy(16, 2);
    let weights = EncoderWeights::<f64>::random(&config, 3).unwrap();
    let h = random(&[5, 16], 1.0, &mut rng);
    let none = TapedAdapters::new();
    for layer in 1..=2 {
        let err = finite_difference_check(
            |t, p| {
                let out = taped_attention(t, p, layer, &weights, config.n_heads, &none)
                    .map_err(|e| nk::TensorError::Invalid(e.to_string()))?;
                weighted_sum(t, out, 2)
            },
            &h,
            H,
        )
        .unwrap();
        record("attention block", err);
        let err = finite_difference_check(
            |t, p| {
                let out = taped_block(t, p, layer, &weights, &config, &none)
                    .map_err(|e| nk::TensorError::Invalid(e.to_string()))?;
                weighted_sum(t, out, 3)
            },
            &h,
            H,
        )
        .unwrap();
        record("transformer block", err);
    }

    // LoRA factors inside a block (B off zero so A has a gradient)
    let a = random(&[2, 16], 0.3, &mut rng);
    let bq = random(&[16, 2], 0.3, &mut rng);
    let av = random(&[2, 16], 0.3, &mut rng);
    let bv = random(&[16, 2], 0.3, &mut rng);
    let factors = [a, bq, av, bv];
    for which in 0..4 {
        let err = finite_difference_check(
            |t, p| {
                let v: Vec<Var> = (0..4).map(|i| if i == which { p } else { t.constant(factors[i].clone()) }).collect();
                let mut ads = TapedAdapters::new();
                ads.insert((1, Projection::Query), TapedLora { a: v[0], b: v[1], scale: 2.0 });
                ads.insert((1, Projection::Value), TapedLora { a: v[2], b: v[3], scale: 2.0 });
                let hv = t.constant(h.clone());
                let h1 = taped_block(t, hv, 1, &weights, &config, &ads)
                    .map_err(|e| nk::TensorError::Invalid(e.to_string()))?;
                let h2 = taped_block(t, h1, 2, &weights, &config, &ads)
                    .map_err(|e| nk::TensorError::Invalid(e.to_string()))?;
                weighted_sum(t, h2, 4)
            },
            &factors[which],
            H,
        )
        .unwrap();
        record("lora A/B", err);
    }

    let expected = [
        "attention block",
        "layer_norm",
        "linear probe",
        "lora A/B",
        "mlp probe",
        "softmax-cross-entropy",
        "transformer block",
    ];
    ensure(worst.keys().copied().eq(expected), || format!("missing checks: {worst:?}"))?;
    let max = worst.values().copied().fold(0.0, f64::max);
    let summary: Vec<String> = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect();
    ensure(max < GRAD_TOL, || format!("max relative error {max:.2e}: {}", summary.join(", ")))?;
    Ok(format!("max relative error {max:.1e} ({})", summary.join(", ")))
}

// ---------------------------------------------------------------- lora merge

fn lora_merge() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (d_out, d_in, r) = (12, 10, 3);
    let w = random(&[d_out, d_in], 1.0, &mut rng);
    let ad = LoraAdapter::from_parts(
        1,
        Projection::Query,
        random(&[r, d_in], 1.0, &mut rng),
        random(&[d_out, r], 1.0, &mut rng),
        5.0,
    )
    .unwrap();
    let merged = merge(&w, &ad).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let x = random(&[d_in], 1.0, &mut rng);
        let a = adapted_forward(&x, &w, &ad).unwrap();
        let m = nk::linear(&x.clone().reshape(&[1, d_in]).unwrap(), &merged, None).unwrap();
        worst = worst.max(a.reshape(&[1, d_out]).unwrap().max_abs_diff(&m).unwrap());
    }
    ensure(worst < 1e-10, || format!("max abs diff {worst:.2e}"))?;

    let zero = LoraAdapter::init(1, Projection::Value, d_in, d_out, r, 16.0, &mut rng).unwrap();
    ensure(merge(&w, &zero).unwrap() == w, || "B = 0 merge changed W".into())?;
    for _ in 0..100 {
        let x = random(&[4, d_in], 1.0, &mut rng);
        let plain = nk::linear(&x, &w, None).unwrap();
        ensure(adapted_forward(&x, &w, &zero).unwrap() == plain, || "B = 0 forward not exact".into())?;
    }
    Ok(format!("max abs diff {worst:.1e} over 100 inputs; B = 0 exact"))
}

// ------------------------------------------------------------ metric oracles

/// All sequences of length `n` over `0..c`.
fn sequences(n: usize, c: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..n {
        out = out
            .into_iter()
            .flat_map(|s| (0..c).map(move |v| [s.clone(), vec![v]].concat()))
            .collect();
    }
    out
}

/// Macro-F1 from precision and recall as exact ratios: with
/// P = tp/|pred c| and R = tp/|true c|, 2PR/(P+R) = 2tp/(|pred c| + |true c|).
fn f1_oracle(t: &[usize], p: &[usize], c: usize) -> f64 {
    let mut total = 0.0;
    for k in 0..c {
        let hits = t.iter().zip(p).filter(|&(&a, &b)| a == k && b == k).count();
        let predicted = p.iter().filter(|&&v| v == k).count();
        let actual = t.iter().filter(|&&v| v == k).count();
        if hits > 0 {
            total += (2 * hits) as f64 / (predicted + actual) as f64;
        }
    }
    total / c as f64
}

/// Mann-Whitney U from mid-ranks, kept in doubled integers.
fn auc_oracle(pos: &[bool], scores: &[f64]) -> Option<f64> {
    let n = scores.len();
    let np = pos.iter().filter(|&&p| p).count();
    let nn = n - np;
    if np == 0 || nn == 0 {
        return None;
    }
    let mut twice_rank_sum = 0u64;
    for i in (0..n).filter(|&i| pos[i]) {
        let below = scores.iter().filter(|&&s| s < scores[i]).count() as u64;
        let equal = scores.iter().filter(|&&s| s == scores[i]).count() as u64;
        // mid-rank = below + (equal + 1) / 2
        twice_rank_sum += 2 * below + equal + 1;
    }
    let twice_u = twice_rank_sum - (np * (np + 1)) as u64;
    Some((twice_u as f64 / 2.0) / (np as f64 * nn as f64))
}

fn metric_oracles() -> Check {
    let mut cases = 0usize;
    for c in 1..=3 {
        for n in 1..=6 {
            let all = sequences(n, c);
            for t in &all {
                for p in &all {
                    let got = macro_f1(t, p, c);
                    let want = f1_oracle(t, p, c);
                    ensure(got == want, || format!("macro_f1 {t:?} {p:?}: {got} vs {want}"))?;
                    cases += 1;
                }
            }
        }
    }
    let levels = [0.1, 0.5, 0.9];
    for n in 1..=6 {
        for labels in sequences(n, 2) {
            let pos: Vec<bool> = labels.iter().map(|&y| y == 1).collect();
            for s in sequences(n, 3) {
                let scores: Vec<f64> = s.iter().map(|&i| levels[i]).collect();
                match (auc_binary(&pos, &scores), auc_oracle(&pos, &scores)) {
                    (Ok(a), Some(b)) => ensure(a == b, || format!("auc {labels:?} {scores:?}: {a} vs {b}"))?,
                    (Err(EvalError::UndefinedAuc), None) => {}
                    (a, b) => return Err(format!("auc {labels:?} {scores:?}: {a:?} vs {b:?}")),
                }
                cases += 1;
            }
        }
    }
    // three-class one-vs-rest on quantized probability rows
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for n in 2..=6 {
        for labels in sequences(n, 3) {
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| {
                    let raw: Vec<f64> = (0..3).map(|_| rng.random_range(1..4) as f64).collect();
                    let s: f64 = raw.iter().sum();
                    raw.iter().map(|v| v / s).collect()
                })
                .collect();
            let probs = Tensor::from_rows(&rows).unwrap();
            let present: BTreeSet<usize> = labels.iter().copied().collect();
            let mut parts = Vec::new();
            for &k in &present {
                let pos: Vec<bool> = labels.iter().map(|&y| y == k).collect();
                let col: Vec<f64> = rows.iter().map(|r| r[k]).collect();
                if let Some(v) = auc_oracle(&pos, &col) {
                    parts.push(v);
                }
            }
            let got = auc(&labels, &probs);
            if present.len() < 2 {
                ensure(matches!(got, Err(EvalError::UndefinedAuc)), || format!("{labels:?}: {got:?}"))?;
            } else {
                let want = parts.iter().sum::<f64>() / parts.len() as f64;
                let got = got.map_err(|e| e.to_string())?;
                ensure(got == want, || format!("multiclass auc {labels:?}: {got} vs {want}"))?;
            }
            cases += 1;
        }
    }
    let f1 = macro_f1(&[0, 0, 1, 1], &[0, 1, 1, 1], 2);
    ensure(f1 == (2.0 / 3.0 + 4.0 / 5.0) / 2.0, || format!("worked F1 {f1}"))?;
    let a = auc_binary(&[false, false, true, true], &[0.1, 0.4, 0.35, 0.8]).unwrap();
    ensure(a == 0.75, || format!("worked AUC {a}"))?;
    Ok(format!("{cases} exhaustive cases equal; F1 {f1:.4}, AUC {a}"))
}

// ------------------------------------------------------------ split integrity

fn split_integrity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (mut loso, mut kfold, mut refused) = (0, 0, 0);
    for case in 0..1000 {
        let n = rng.random_range(4..120);
        let classes = rng.random_range(2..5);
        let n_subjects = rng.random_range(1..9);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let subjects: Vec<String> = (0..n).map(|_| format!("s{}", rng.random_range(0..n_subjects))).collect();
        let fail = |m: String| format!("manifest {case}: {m}");

        let distinct: BTreeSet<&String> = subjects.iter().collect();
        match make_loso_splits(&subjects) {
            Ok(plan) => {
                ensure(plan.folds.len() == distinct.len(), || fail("one fold per subject".into()))?;
                let mut seen = vec![0; n];
                for f in &plan.folds {
                    let test_subjects: BTreeSet<&String> = f.test.iter().map(|&i| &subjects[i]).collect();
                    ensure(test_subjects.len() == 1, || fail("test fold spans subjects".into()))?;
                    let s = *test_subjects.iter().next().unwrap();
                    ensure(f.train.iter().all(|&i| &subjects[i] != s), || fail("subject leak".into()))?;
                    let all: Vec<usize> = subjects.iter().enumerate().filter(|(_, x)| *x == s).map(|(i, _)| i).collect();
                    let mut test = f.test.clone();
                    test.sort_unstable();
                    ensure(test == all, || fail("subject fold incomplete".into()))?;
                    ensure(f.train.len() + f.test.len() == n, || fail("train + test != n".into()))?;
                    f.test.iter().for_each(|&i| seen[i] += 1);
                }
                ensure(seen.iter().all(|&c| c == 1), || fail("record not tested exactly once".into()))?;
                loso += 1;
            }
            Err(_) => ensure(distinct.len() < 2, || fail("loso refused a valid manifest".into()))?,
        }

        let k = rng.random_range(2..6);
        let mut counts = vec![0usize; classes];
        labels.iter().for_each(|&y| counts[y] += 1);
        let stratifiable = counts.iter().all(|&c| c == 0 || c >= k);
        match make_kfold_splits(&labels, k, case as u64) {
            Ok(plan) => {
                ensure(stratifiable, || fail("kfold accepted an unstratifiable class".into()))?;
                ensure(plan.folds.len() == k, || fail("fold count".into()))?;
                let mut seen = vec![0; n];
                for f in &plan.folds {
                    let test: BTreeSet<usize> = f.test.iter().copied().collect();
                    let train: BTreeSet<usize> = f.train.iter().copied().collect();
                    ensure(test.is_disjoint(&train), || fail("train/test overlap".into()))?;
                    ensure(test.len() + train.len() == n, || fail("fold does not cover".into()))?;
                    for (c, &total) in counts.iter().enumerate() {
                        let in_test = f.test.iter().filter(|&&i| labels[i] == c).count();
                        ensure(in_test == total / k || in_test == total.div_ceil(k), || {
                            fail(format!("class {c}: {in_test} of {total} in a test fold, k = {k}"))
                        })?;
                    }
                    f.test.iter().for_each(|&i| seen[i] += 1);
                }
                ensure(seen.iter().all(|&c| c == 1), || fail("record not tested exactly once".into()))?;
                kfold += 1;
            }
            Err(EvalError::Stratification { .. }) => {
                ensure(!stratifiable, || fail("kfold refused a stratifiable manifest".into()))?;
                refused += 1;
            }
            Err(e) => return Err(fail(e.to_string())),
        }
    }
    Ok(format!("1000 manifests: {loso} loso plans, {kfold} kfold plans, {refused} correctly refused"))
}

// ------------------------------------------------------------------ end to end

struct Toy {
    _dir: tempfile::TempDir,
    manifest: xmodal::ingest::DatasetManifest,
    config: EncoderConfig,
    weights: EncoderWeights<f32>,
}

fn toy_pipeline() -> Toy {
    let dir = tempfile::tempdir().unwrap();
    let manifest_path = SinusoidTask::default().write(&dir.path().join("data")).unwrap();
    let ckpt = dir.path().join("toy.xmc");
    write_toy_checkpoint(&ckpt, 64, 2, 0).unwrap();
    let (config, weights) = load_checkpoint(&ckpt).unwrap();
    Toy {
        manifest: load_manifest(&manifest_path).unwrap(),
        _dir: dir,
        config,
        weights,
    }
}

fn end_to_end(toy: &Toy) -> Check {
    let m = &toy.manifest;
    ensure(
        m.len() == 200 && m.sample_rate == 100.0 && m.window_samples == 200 && m.preprocess.upsample == 2,
        || "task does not match the stated construction".into(),
    )?;
    let labels = m.labels();
    let plan = make_kfold_splits(&labels, 5, 0).map_err(|e| e.to_string())?;

    let x = feature_matrix(m).map_err(|e| e.to_string())?;
    let forest = evaluate_forest(&x, &labels, 2, &plan, &ForestConfig::default(), serde_json::Value::Null)
        .map_err(|e| e.to_string())?;
    ensure(forest.macro_f1.mean >= 0.95, || format!("baseline macro-F1 {}", forest.macro_f1.display()))?;

    let options = ExtractOptions {
        layers: BTreeSet::from([0]),
        pooling: Pooling::Mean,
        preprocess: m.preprocess.clone(),
    };
    let (cache, report) =
        extract_embeddings(m, &toy.config, &toy.weights, &options, None).map_err(|e| e.to_string())?;
    ensure(report.succeeded(), || report.summary())?;
    let emb = cache.matrix(0).map_err(|e| e.to_string())?;
    let (probe, _) = xmodal::evalkit::evaluate_probe(
        &emb,
        &labels,
        2,
        &plan,
        ProbeKind::Mlp,
        &TrainConfig::default(),
        true,
        serde_json::Value::Null,
    )
    .map_err(|e| e.to_string())?;
    ensure(probe.macro_f1.mean >= 0.90, || format!("layer-0 MLP macro-F1 {}", probe.macro_f1.display()))?;
    Ok(format!(
        "baseline macro-F1 {}, layer-0 MLP macro-F1 {}",
        forest.macro_f1.display(),
        probe.macro_f1.display()
    ))
}

// ------------------------------------------------------------ baseline sanity

fn baseline_sanity() -> Check {
    let (rate, n) = (100.0, 200);
    let bin = rate / n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let f = rng.random_range(1.0..45.0);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let amp = rng.random_range(0.1..10.0);
        let x: Vec<f64> = (0..n)
            .map(|i| amp * (2.0 * std::f64::consts::PI * f * i as f64 / rate + phase).sin())
            .collect();
        let w = WindowRecord {
            channels: vec![x],
            sample_rate: rate,
            label: 0,
            subject: String::new(),
        };
        let got = engineered_features(&w).unwrap().get("ch0.dominant_frequency_hz").unwrap();
        worst = worst.max((got - f).abs());
    }
    ensure(worst <= bin, || format!("dominant frequency off by {worst} Hz, bin {bin} Hz"))?;

    let x = random(&[80, 6], 1.0, &mut rng);
    let y: Vec<usize> = (0..80).map(|i| usize::from(x.at2(i, 0) + 0.3 * x.at2(i, 2) > 0.0)).collect();
    let cfg = ForestConfig {
        n_trees: 30,
        seed: 17,
        ..Default::default()
    };
    let a = train_forest(&x, &y, 2, &cfg).unwrap().predict_batch(&x).unwrap();
    let b = train_forest(&x, &y, 2, &cfg).unwrap().predict_batch(&x).unwrap();
    let same = a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits());
    ensure(same, || "seeded forests disagree".into())?;
    Ok(format!("dominant frequency within {worst:.3} Hz (bin {bin} Hz); forest predictions bit-identical"))
}

// ---------------------------------------------------------------- filterscope

fn filterscope_checks(toy: &Toy) -> Check {
    let t = BandThresholds::default();
    let n_fft = 256;
    let moving = vec![1.0 / 8.0; 8];
    let diff = vec![1.0, -1.0];
    let impulse = vec![1.0];
    let classes = [
        classify_response(&frequency_response(&moving, n_fft).unwrap(), &t),
        classify_response(&frequency_response(&diff, n_fft).unwrap(), &t),
        classify_response(&frequency_response(&impulse, n_fft).unwrap(), &t),
    ];
    ensure(
        classes == [BandClass::Lowpass, BandClass::Highpass, BandClass::Broadband],
        || format!("classes {classes:?}"),
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut gap = 0.0f64;
    for k in [1, 2, 5, 10, 64] {
        for _ in 0..20 {
            let taps: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
            gap = gap.max(parseval_gap(&taps, 128).unwrap());
        }
    }
    ensure(gap < 1e-9, || format!("Parseval gap {gap:e}"))?;

    let conv0 = toy.weights.get("conv.0.weight").unwrap();
    let reports = analyze_filters(conv0, 8, None, 64, &t).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().unwrap();
    let csv = responses_csv(&reports);
    let svg = responses_svg(&reports);
    std::fs::write(dir.path().join("filters.csv"), &csv).unwrap();
    std::fs::write(dir.path().join("filters.svg"), &svg).unwrap();
    ensure(csv.lines().count() == 1 + 8 * 33, || "csv row count".into())?;
    ensure(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"), || "svg framing".into())?;
    Ok(format!(
        "lowpass/highpass/broadband as expected; Parseval gap {gap:.1e}; {} csv rows, {} svg bytes",
        csv.lines().count() - 1,
        svg.len()
    ))
}

// ------------------------------------------------------------ reproducibility

fn sweep_from_echo(cache: &xmodal::extract::EmbeddingCache, echo: &serde_json::Value) -> SweepReport {
    let train: TrainConfig = serde_json::from_value(echo["train"].clone()).unwrap();
    let kind: ProbeKind = serde_json::from_value(echo["probe"].clone()).unwrap();
    let layers: Vec<usize> = serde_json::from_value(echo["layers"].clone()).unwrap();
    let scheme: EvalScheme = serde_json::from_value(echo["scheme"].clone()).unwrap();
    let split_seed = echo["split_seed"].as_u64().unwrap();
    let plan = match scheme {
        EvalScheme::Loso => make_loso_splits(&cache.subjects()).unwrap(),
        EvalScheme::Kfold { k } => make_kfold_splits(&cache.labels(), k, split_seed).unwrap(),
    };
    let standardize = echo["standardize"].as_bool().unwrap();
    run_layer_sweep(cache, &layers, 2, &plan, kind, &train, standardize, echo.clone()).unwrap()
}

fn reproducibility(toy: &Toy) -> Check {
    let options = ExtractOptions {
        layers: BTreeSet::from([0, 1, 2]),
        pooling: Pooling::Mean,
        preprocess: toy.manifest.preprocess.clone(),
    };
    let (cache, _) = extract_embeddings(&toy.manifest, &toy.config, &toy.weights, &options, None).unwrap();
    let echo = serde_json::json!({
        "train": TrainConfig { epochs: 8, hidden_dim: 32, seed: 5, ..Default::default() },
        "probe": ProbeKind::Mlp,
        "layers": [0, 1, 2],
        "scheme": EvalScheme::Kfold { k: 4 },
        "split_seed": 3,
        "standardize": true,
    });
    let first = sweep_from_echo(&cache, &echo).to_json();
    let embedded: serde_json::Value = serde_json::from_str::<serde_json::Value>(&first).unwrap()["config"].clone();
    let serial = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let second = serial.install(|| sweep_from_echo(&cache, &embedded).to_json());
    ensure(first == second, || "regenerated sweep differs".into())?;
    Ok(format!("sweep report regenerated from its embedded config: {} identical bytes", first.len()))
}

#[test]
fn acceptance() {
    let toy = toy_pipeline();
    let outcomes = [
        criterion("frame-count oracle", Some(Duration::from_secs(1)), frame_counts),
        criterion("gradient suite", Some(Duration::from_secs(30)), gradient_suite),
        criterion("lora merge equivalence", None, lora_merge),
        criterion("metric oracles", None, metric_oracles),
        criterion("split integrity", None, split_integrity),
        criterion("end-to-end synthetic pipeline", Some(Duration::from_secs(300)), || end_to_end(&toy)),
        criterion("baseline sanity", None, baseline_sanity),
        criterion("filterscope", None, || filterscope_checks(&toy)),
        criterion("reproducibility", None, || reproducibility(&toy)),
    ];
    let failed: Vec<String> = outcomes
        .iter()
        .filter(|o| !o.passed)
        .map(|o| format!("{}: {}", o.name, o.detail))
        .collect();
    assert!(failed.is_empty(), "failed criteria:\n{}", failed.join("\n"));
}
