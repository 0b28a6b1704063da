//! Acceptance suite. Criteria run one after another so that each time
//! budget is measured without competing test threads; every criterion
//! prints one PASS/FAIL line.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::Rng;
use unroll_tuner::backend::CostModel;
use unroll_tuner::baselines::{knn_predict, KnnConfig, LabeledRows};
use unroll_tuner::bench_programs::{blur, mmxm, rgb_gray, smm};
use unroll_tuner::dataset::{label_sample, split_dataset};
use unroll_tuner::eval::{accuracy, compute_metrics};
use unroll_tuner::featurize::{data_loaded_per_level, extract_features};
use unroll_tuner::generator::{gen_program, gen_schedules, rng_for, GenConfig};
use unroll_tuner::interp::{execute, outputs_match};
use unroll_tuner::mlp::{
    self, cross_entropy, softmax_rows, train_examples, Examples, Matrix, MlpModel, TrainConfig,
};
use unroll_tuner::{Program, ScheduledProgram, UnrollFactor};

type Outcome = Result<String, String>;

/// Number, name, time budget in seconds, check.
type Criterion = (u32, &'static str, u64, fn() -> Outcome);

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn cli(args: &[&str]) -> Result<(), String> {
    let mut argv = vec!["unroll-tuner"];
    argv.extend_from_slice(args);
    match unroll_tuner_cli::run(argv.clone()) {
        0 => Ok(()),
        code => Err(format!("`{}` exited with {code}", argv.join(" "))),
    }
}

fn levels(p: Program) -> Vec<u64> {
    let sp = ScheduledProgram::new(p);
    let d = sp.depth();
    data_loaded_per_level(&sp)[..d].to_vec()
}

fn c1_feature_tables() -> Outcome {
    for m in (1..=20).chain([64]) {
        check(levels(mmxm(m as i64)) == vec![3 * m * m, m * m + 2 * m, 2 * m], format!("MMxM at {m}"))?;
        check(levels(smm(m as i64)) == vec![2 * m * m, 2 * m], format!("SMM at {m}"))?;
        check(levels(rgb_gray(m as i64)) == vec![3 * m * m, 3 * m], format!("RGB_gray at {m}"))?;
        check(levels(blur(m as i64)) == vec![3 * m * m * m, 3 * m * m, 3 * m], format!("Blur at {m}"))?;
    }
    check(levels(mmxm(64)) == vec![12288, 4224, 128], "MMxM at 64")?;
    check(levels(smm(64)) == vec![8192, 128], "SMM at 64")?;
    check(levels(rgb_gray(64)) == vec![12288, 192], "RGB_gray at 64")?;
    check(levels(blur(64)) == vec![786432, 12288, 192], "Blur at 64")?;
    Ok("four tables, sizes 1..=20 and 64".into())
}

fn c2_load_oracle() -> Outcome {
    for i in 0..200 {
        let p = common::small_program(2024, i, 6);
        let sp = ScheduledProgram::new(p.clone());
        let got = extract_features(&sp).map_err(|e| e.to_string())?.data_loaded;
        let want = common::distinct_loads_per_level(&p);
        check(got == want, format!("program {i}: {got:?} vs {want:?}"))?;
    }
    Ok("200 programs".into())
}

fn c3_transform_semantics() -> Outcome {
    let mut pairs = 0;
    let mut non_trivial = 0;
    let mut i = 0u64;
    while pairs < 200 {
        let p = common::small_program(77, i, 8);
        let cfg = GenConfig {
            seed: 77,
            schedules_per_program: 4,
            ..GenConfig::default()
        };
        let scheds = gen_schedules(&cfg, i, &p);
        let mut rng = rng_for(77, i, 123);
        let pick = rng.random_range(0..scheds.len());
        let u = UnrollFactor::ALL[rng.random_range(0..7)];
        let sp = scheds[pick].apply_unroll(u).map_err(|e| e.to_string())?;
        if !sp.schedule().is_empty() {
            non_trivial += 1;
        }
        let want = common::reference_output(&p);
        check(
            outputs_match(execute(&sp).output(), &want, 1e-12),
            format!("program {i} with `{}`", sp.schedule()),
        )?;
        pairs += 1;
        i += 1;
    }
    Ok(format!("{pairs} pairs, {non_trivial} with transforms"))
}

fn c4_unroll_arithmetic() -> Outcome {
    let mut p = smm(1);
    p.iterators.truncate(1);
    p.output.indices.truncate(1);
    let mut checked = 0;
    for n in 1..=300i64 {
        p.iterators[0].upper = n;
        let base = ScheduledProgram::new(p.clone());
        for u in &UnrollFactor::ALL[1..] {
            let sp = base.apply_unroll(*u).map_err(|e| e.to_string())?;
            let uu = u.get() as i64;
            check(sp.main_trips() * uu + sp.remainder_extent() == n, format!("N={n} u={uu}"))?;
            check(sp.main_trips() == n / uu && sp.remainder_extent() < uu, format!("N={n} u={uu} split"))?;
            checked += 1;
        }
    }
    Ok(format!("{checked} (N, u) pairs"))
}

fn c5_mlp_numerics() -> Outcome {
    let mut rng = rng_for(5, 0, 0);
    let logits = Matrix::from_rows(
        &(0..50)
            .map(|_| (0..7).map(|_| rng.random_range(-30.0..30.0)).collect())
            .collect::<Vec<_>>(),
    );
    let p = softmax_rows(&logits);
    for i in 0..p.rows {
        let s: f64 = p.row(i).iter().sum();
        check((s - 1.0).abs() <= 1e-9, format!("row {i} sums to {s}"))?;
    }
    let uniform = softmax_rows(&Matrix::zeros(10, 7));
    let labels: Vec<usize> = (0..10).map(|i| i % 7).collect();
    let ce = cross_entropy(&uniform, &labels);
    check((ce - 7f64.ln()).abs() <= 1e-6, format!("uniform cross-entropy {ce}"))?;

    let classes = UnrollFactor::ALL.to_vec();
    let model = MlpModel::with_dims(&[4, 6, 5, 7], &[0.1, 0.2], classes, 9);
    let x = Matrix::from_rows(
        &(0..6)
            .map(|_| (0..4).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect::<Vec<_>>(),
    );
    let y = vec![0, 3, 6, 2, 5, 1];
    let loss_at = |m: &MlpModel| {
        let mut r = rng_for(1, 1, 1);
        m.loss_and_gradients(&x, &y, &mut r).unwrap().0
    };
    let (_, grads, _) = model
        .loss_and_gradients(&x, &y, &mut rng_for(1, 1, 1))
        .map_err(|e| e.to_string())?;
    let h = 1e-5;
    let mut worst = 0f64;
    let mut count = 0;
    for (t, g) in grads.iter().enumerate() {
        for (i, &gi) in g.iter().enumerate() {
            let mut a = model.clone();
            a.params_mut()[t][i] += h;
            let mut b = model.clone();
            b.params_mut()[t][i] -= h;
            let num = (loss_at(&a) - loss_at(&b)) / (2.0 * h);
            worst = worst.max((num - gi).abs() / num.abs().max(gi.abs()).max(1e-6));
            count += 1;
        }
    }
    check(worst < 1e-4, format!("worst relative gradient error {worst:e}"))?;
    Ok(format!("{count} gradients, worst relative error {worst:.2e}"))
}

fn clustered(seed: u64, n: usize, width: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = rng_for(seed, 0, 0);
    let centers: Vec<Vec<f64>> = (0..7)
        .map(|_| (0..width).map(|_| rng.random_range(-4.0..4.0)).collect())
        .collect();
    let mut x = Vec::new();
    let mut y = Vec::new();
    for i in 0..n {
        let c = i % 7;
        x.push(centers[c].iter().map(|m| m + rng.random_range(-0.5..0.5)).collect());
        y.push(c);
    }
    (x, y)
}

fn c6_separable() -> Outcome {
    let (x, y) = clustered(6, 2000, 8);
    let idx: Vec<usize> = (0..x.len()).collect();
    let split = split_dataset(&idx, 6).map_err(|e| e.to_string())?;
    let ex = |ids: &[usize]| Examples {
        x: Matrix::from_rows(&ids.iter().map(|&i| x[i].clone()).collect::<Vec<_>>()),
        y: ids.iter().map(|&i| y[i]).collect(),
    };
    let (tr, va, te) = (ex(&split.train), ex(&split.valid), ex(&split.test));
    let cfg = TrainConfig {
        seed: 6,
        ..TrainConfig::default()
    };
    let fresh = || MlpModel::new(8, UnrollFactor::ALL.to_vec(), 6);
    let (a, ha) = train_examples(fresh(), &tr, &va, &cfg).map_err(|e| e.to_string())?;
    let (b, _) = train_examples(fresh(), &tr, &va, &cfg).map_err(|e| e.to_string())?;
    check(a == b, "two runs with one seed differ")?;
    let pred = a.predict_indices(&te.x).map_err(|e| e.to_string())?;
    let acc = pred.iter().zip(&te.y).filter(|(p, t)| p == t).count() as f64 / te.y.len() as f64;
    check(acc >= 0.90, format!("held-out accuracy {acc:.4}"))?;
    Ok(format!("held-out accuracy {acc:.4} after {} epochs", ha.len()))
}

fn c7_realistic() -> Outcome {
    let cfg = GenConfig {
        seed: 7,
        schedules_per_program: 3,
        ..GenConfig::default()
    };
    let backend = CostModel::default();
    let mut rows = Vec::new();
    for i in 0..2000u64 {
        let p = gen_program(&cfg, i);
        let scheds = gen_schedules(&cfg, i, &p);
        let sp = &scheds[i as usize % scheds.len()];
        rows.push(label_sample(sp, &backend, 1).map_err(|e| e.to_string())?.row());
    }
    let split = split_dataset(&rows, 7).map_err(|e| e.to_string())?;
    let tc = TrainConfig {
        seed: 7,
        ..TrainConfig::default()
    };
    let (model, hist) = mlp::fit(&split.train, &split.valid, &UnrollFactor::ALL, &tc)
        .map_err(|e| e.to_string())?;
    let acc = accuracy(&model, &split.test).map_err(|e| e.to_string())?;
    check(acc >= 2.0 / 7.0, format!("held-out accuracy {acc:.4}"))?;
    Ok(format!(
        "2000 programs, held-out accuracy {acc:.4} after {} epochs",
        hist.len()
    ))
}

fn c8_metrics() -> Outcome {
    let m = compute_metrics(1.56327, 1.56327, 2.13072).map_err(|e| e.to_string())?;
    check((m.pc - 1.000).abs() <= 1e-3 && (m.sp - 1.362).abs() <= 1e-3, format!("{m:?}"))?;
    let m2 = compute_metrics(0.080874, 0.080841, 0.081542).map_err(|e| e.to_string())?;
    check((m2.pc - 0.999).abs() <= 1e-3 && (m2.sp - 1.008).abs() <= 1e-3, format!("{m2:?}"))?;
    Ok(format!(
        "({:.3}, {:.3}) and ({:.3}, {:.3})",
        m.pc, m.sp, m2.pc, m2.sp
    ))
}

fn pipeline(dir: &Path) -> Result<(), String> {
    let d = |f: &str| dir.join(f).display().to_string();
    cli(&["gen", "--seed", "9", "--count", "500", "--out", &d("progs")])?;
    cli(&["label", "--seed", "9", "--backend", "cost", "--input", &d("progs"), "--out", &d("corpus.csv")])?;
    cli(&["train", "--seed", "9", "--data", &d("corpus.csv"), "--out", &d("model.json")])?;
    cli(&["bench", "--seed", "9", "--backend", "cost", "--model", &d("model.json"), "--out", &d("report.csv")])
}

fn c9_determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    pipeline(a.path())?;
    pipeline(b.path())?;
    let mut progs: Vec<String> = std::fs::read_dir(a.path().join("progs"))
        .map_err(|e| e.to_string())?
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    progs.sort();
    let mut files: Vec<String> = progs.iter().map(|p| format!("progs/{p}")).collect();
    files.extend(["corpus.csv", "corpus.csv.timings.csv", "model.json", "report.csv"].map(String::from));
    for f in &files {
        let x = std::fs::read(a.path().join(f)).map_err(|e| format!("{f}: {e}"))?;
        let y = std::fs::read(b.path().join(f)).map_err(|e| format!("{f}: {e}"))?;
        check(x == y, format!("{f} differs between runs"))?;
    }
    let report = std::fs::read_to_string(a.path().join("report.csv")).unwrap();
    check(report.lines().count() == 16, "report should have 15 cases")?;
    Ok(format!("{} files identical", files.len()))
}

fn brute_force_knn(train: &LabeledRows, k: usize, q: &[f64]) -> UnrollFactor {
    let mut d: Vec<(f64, usize)> = train
        .x
        .iter()
        .enumerate()
        .map(|(i, r)| (r.iter().zip(q).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt(), i))
        .collect();
    d.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let mut votes = [0usize; 7];
    for &(_, i) in &d[..k] {
        votes[UnrollFactor::ALL.iter().position(|f| *f == train.y[i]).unwrap()] += 1;
    }
    let top = *votes.iter().max().unwrap();
    UnrollFactor::ALL[votes.iter().position(|v| *v == top).unwrap()]
}

fn c10_baselines() -> Outcome {
    // 20 points on a small integer grid so that distance ties occur
    let pts: [(f64, f64, usize); 20] = [
        (0.0, 0.0, 1), (1.0, 0.0, 1), (0.0, 1.0, 2), (1.0, 1.0, 2), (2.0, 0.0, 3),
        (2.0, 2.0, 3), (3.0, 1.0, 4), (3.0, 3.0, 4), (4.0, 0.0, 5), (4.0, 4.0, 5),
        (0.0, 4.0, 6), (1.0, 3.0, 6), (2.0, 4.0, 0), (3.0, 2.0, 0), (5.0, 5.0, 1),
        (5.0, 0.0, 2), (0.0, 5.0, 3), (2.0, 1.0, 4), (1.0, 2.0, 5), (4.0, 2.0, 6),
    ];
    let train = LabeledRows::new(
        pts.iter().map(|&(a, b, _)| vec![a, b]).collect(),
        pts.iter().map(|&(_, _, c)| UnrollFactor::ALL[c]).collect(),
    );
    let mut queries = 0;
    for qx in 0..=10 {
        for qy in 0..=10 {
            let q = [qx as f64 * 0.5, qy as f64 * 0.5];
            for k in [1, 2, 3, 4, 5, 7, 20] {
                let got = knn_predict(&train, KnnConfig { k }, &q).map_err(|e| e.to_string())?;
                check(got == brute_force_knn(&train, k, &q), format!("query {q:?} k={k}"))?;
                queries += 1;
            }
        }
    }

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = |f: &str| dir.path().join(f).display().to_string();
    cli(&["gen", "--seed", "10", "--count", "120", "--out", &d("progs")])?;
    cli(&["label", "--seed", "10", "--input", &d("progs"), "--out", &d("corpus.csv")])?;
    cli(&["train", "--seed", "10", "--max-epochs", "3", "--data", &d("corpus.csv"), "--out", &d("model.json")])?;
    cli(&["baselines", "--seed", "10", "--data", &d("corpus.csv"), "--model", &d("model.json"), "--out", &d("table.txt")])?;
    let table = std::fs::read_to_string(dir.path().join("table.txt")).map_err(|e| e.to_string())?;
    let names: Vec<&str> = table.lines().skip(2).filter_map(|l| l.split_whitespace().next()).collect();
    check(names == ["mlp", "knn", "tree"], format!("table rows {names:?}"))?;
    Ok(format!("{queries} KNN queries exact; table rows {names:?}"))
}

#[test]
fn acceptance_suite() {
    let criteria: Vec<Criterion> = vec![
        (1, "feature tables", 1, c1_feature_tables),
        (2, "load-count oracle", 30, c2_load_oracle),
        (3, "transform semantics", 60, c3_transform_semantics),
        (4, "unroll arithmetic", 1, c4_unroll_arithmetic),
        (5, "MLP numerics", 30, c5_mlp_numerics),
        (6, "separable learning", 180, c6_separable),
        (7, "realistic learning", 300, c7_realistic),
        (8, "metric anchors", 1, c8_metrics),
        (9, "pipeline determinism", 600, c9_determinism),
        (10, "baseline parity", 30, c10_baselines),
    ];
    let mut failed = Vec::new();
    for (n, name, limit, f) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(d) if elapsed > Duration::from_secs(limit) => Err(format!("{d}; over the {limit} s budget")),
            o => o,
        };
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d.clone()),
            Err(e) => ("FAIL", e.clone()),
        };
        println!("criterion {n:>2} {name:<22} {tag} {:>8.2}s / {limit}s  {detail}", elapsed.as_secs_f64());
        if outcome.is_err() {
            failed.push(n);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
