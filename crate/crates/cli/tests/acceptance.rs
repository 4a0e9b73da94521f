//! One pass/fail line per acceptance criterion. Exits nonzero if any gating criterion fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::Rng;
use seqtransfer::corpus::{parse_column_file, read_column_file, serialize_column, Domain};
use seqtransfer::crf::{log_likelihood, log_partition, viterbi};
use seqtransfer::eval::{per_sentence_f1, randomization_test, span_f1};
use seqtransfer::numerics::{stream_rng, Matrix};
use seqtransfer::transfer::{la_mmd, mmd_sq, BandwidthPolicy, LabeledHiddenPool, MmdConfig};
use seqtransfer_cli::archive;
use tempfile::TempDir;

const SEED: u64 = 20240601;

struct Outcome {
    pass: bool,
    /// A failing report-only criterion is printed and flagged but does not fail the run.
    gating: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        gating: true,
        detail: detail.into(),
    }
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_seqtransfer"))
}

fn run_ok(cmd: &mut Command) -> Vec<u8> {
    let o = cmd.output().expect("binary runs");
    assert!(
        o.status.success(),
        "{:?} failed: {}",
        cmd,
        String::from_utf8_lossy(&o.stderr)
    );
    o.stdout
}

fn all_sequences(n: usize, m: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..n {
        out = out
            .into_iter()
            .flat_map(|p| {
                (0..m).map(move |y| {
                    let mut q = p.clone();
                    q.push(y);
                    q
                })
            })
            .collect();
    }
    out
}

fn naive_score(e: &Matrix, a: &Matrix, y: &[usize]) -> f64 {
    let mut s = 0.0;
    for (t, &yt) in y.iter().enumerate() {
        s += e.get(t, yt);
        if t > 0 {
            s += a.get(y[t - 1], yt);
        }
    }
    s
}

fn random_crf(rng: &mut impl Rng, max_n: usize, max_m: usize) -> (Matrix, Matrix) {
    let n = rng.gen_range(1..=max_n);
    let m = rng.gen_range(1..=max_m);
    (Matrix::uniform(n, m, 2.0, rng), Matrix::uniform(m, m, 2.0, rng))
}

fn crf_exactness() -> Outcome {
    let mut rng = stream_rng(SEED, "acceptance/crf");
    let (mut worst_z, mut worst_v) = (0.0f64, 0.0f64);
    for _ in 0..500 {
        let (e, a) = random_crf(&mut rng, 6, 5);
        let scores: Vec<f64> = all_sequences(e.rows(), e.cols())
            .iter()
            .map(|y| naive_score(&e, &a, y))
            .collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let brute_z = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
        worst_z = worst_z.max((log_partition(&e, &a).unwrap() - brute_z).abs());
        let (path, vscore) = viterbi(&e, &a).unwrap();
        worst_v = worst_v
            .max((naive_score(&e, &a, &path) - max).abs())
            .max((vscore - max).abs());
    }
    outcome(
        worst_z <= 1e-8 && worst_v <= 1e-9,
        format!("500 instances, max |logZ err| = {worst_z:.2e}, max viterbi gap = {worst_v:.2e}"),
    )
}

fn normalization() -> Outcome {
    let mut rng = stream_rng(SEED, "acceptance/normalization");
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (e, a) = random_crf(&mut rng, 6, 5);
        let total: f64 = all_sequences(e.rows(), e.cols())
            .iter()
            .map(|y| log_likelihood(&e, &a, y).unwrap().exp())
            .sum();
        worst = worst.max((total - 1.0).abs());
    }
    outcome(worst <= 1e-10, format!("100 instances, max |sum p - 1| = {worst:.2e}"))
}

fn gradcheck() -> Outcome {
    let start = Instant::now();
    let o = bin()
        .args(["verify", "--gradcheck", "--trials", "20", "--seed", "1"])
        .output()
        .unwrap();
    let secs = start.elapsed().as_secs_f64();
    let stdout = String::from_utf8_lossy(&o.stdout);
    let mut worst = 0.0f64;
    let mut suites = Vec::new();
    for line in stdout.lines().filter(|l| l.starts_with("gradcheck ")) {
        let f: Vec<&str> = line.split(' ').collect();
        suites.push(f[1].to_string());
        let err: f64 = f[3].trim_start_matches("max_rel_err=").parse().unwrap();
        worst = worst.max(err);
    }
    let needed = ["encoder", "crf", "la_mmd", "param_penalty", "total_loss"];
    let covered = needed.iter().all(|n| suites.iter().any(|s| s == n));
    outcome(
        o.status.success() && covered && worst < 1e-4 && secs < 300.0,
        format!(
            "{} suites x 20 points, max rel err = {worst:.2e}, {secs:.1}s",
            suites.len()
        ),
    )
}

fn bound() -> Outcome {
    let start = Instant::now();
    let o = bin()
        .args(["verify", "--bound", "--trials", "1000", "--seed", "1"])
        .output()
        .unwrap();
    let secs = start.elapsed().as_secs_f64();
    let stdout = String::from_utf8_lossy(&o.stdout);
    let all = stdout.lines().any(|l| l == "bound 1000/1000 pass");
    let decreasing = stdout.lines().any(|l| l == "sweep ratio decreasing");
    let ratios: Vec<&str> = stdout
        .lines()
        .filter(|l| l.starts_with("sweep 1e"))
        .map(|l| l.rsplit(' ').next().unwrap())
        .collect();
    outcome(
        o.status.success() && all && decreasing && secs < 120.0,
        format!(
            "1000/1000 {}, sweep ratios {} ({}), {secs:.2}s",
            if all { "pass" } else { "NOT all pass" },
            ratios.join(" > "),
            if decreasing { "decreasing" } else { "not decreasing" }
        ),
    )
}

fn naive_mmd(xs: &[Vec<f64>], xt: &[Vec<f64>], sigma: f64) -> f64 {
    let k = |a: &[f64], b: &[f64]| {
        let mut d = 0.0;
        for i in 0..a.len() {
            d += (a[i] - b[i]) * (a[i] - b[i]);
        }
        (-d / (2.0 * sigma * sigma)).exp()
    };
    let mean = |p: &[Vec<f64>], q: &[Vec<f64>]| {
        let mut s = 0.0;
        for a in p {
            for b in q {
                s += k(a, b);
            }
        }
        s / (p.len() * q.len()) as f64
    };
    mean(xs, xs) + mean(xt, xt) - 2.0 * mean(xs, xt)
}

fn random_pool(rng: &mut impl Rng, dim: usize) -> Vec<Vec<f64>> {
    let n = rng.gen_range(1..=8);
    (0..n)
        .map(|_| (0..dim).map(|_| rng.gen_range(-1.5..1.5)).collect())
        .collect()
}

fn mmd_correctness() -> Outcome {
    let mut rng = stream_rng(SEED, "acceptance/mmd");
    let (mut naive_err, mut self_mmd, mut sum_err) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let dim = rng.gen_range(1..=5);
        let (xs, xt) = (random_pool(&mut rng, dim), random_pool(&mut rng, dim));
        let sigma = rng.gen_range(0.3..3.0);
        naive_err = naive_err.max((mmd_sq(&xs, &xt, sigma).unwrap() - naive_mmd(&xs, &xt, sigma)).abs());
        self_mmd = self_mmd.max(mmd_sq(&xs, &xs, sigma).unwrap());

        let (ys, yt) = (random_pool(&mut rng, dim), random_pool(&mut rng, dim));
        let (mut ps, mut pt) = (LabeledHiddenPool::new(), LabeledHiddenPool::new());
        for (tag, pool, src) in [(1, &xs, true), (1, &xt, false), (3, &ys, true), (3, &yt, false)] {
            for v in pool.iter() {
                if src {
                    ps.push(tag, v.clone())
                } else {
                    pt.push(tag, v.clone())
                }
            }
        }
        for policy in [BandwidthPolicy::Fixed(sigma), BandwidthPolicy::Median] {
            let out = la_mmd(&ps, &pt, &MmdConfig::new(vec![(1, 1), (3, 3)], policy)).unwrap();
            let parts = mmd_sq(&xs, &xt, out.bandwidth).unwrap() + mmd_sq(&ys, &yt, out.bandwidth).unwrap();
            sum_err = sum_err.max((out.value - parts).abs());
        }
    }
    outcome(
        naive_err <= 1e-10 && self_mmd <= 1e-12 && sum_err <= 1e-12,
        format!("100 pool pairs, naive err = {naive_err:.2e}, max MMD(X,X) = {self_mmd:.2e}, two-label sum err = {sum_err:.2e}"),
    )
}

/// `(gold sentences, predicted sentences, expected "p r f1 tp pred gold" line)`.
const SPAN_CASES: [(&[&str], &[&str], &str); 20] = [
    (&["O O O"], &["O O O"], "0.0000 0.0000 0.0000 0 0 0"),
    (
        &["B-PER E-PER O S-LOC"],
        &["B-PER E-PER O S-LOC"],
        "1.0000 1.0000 1.0000 2 2 2",
    ),
    (&["S-LOC O B-ORG E-ORG"], &["O O O O"], "0.0000 0.0000 0.0000 0 0 2"),
    (&["O O O"], &["S-PER O O"], "0.0000 0.0000 0.0000 0 1 0"),
    (&["S-PER"], &["S-LOC"], "0.0000 0.0000 0.0000 0 1 1"),
    (&["B-PER I-PER E-PER"], &["B-PER E-PER O"], "0.0000 0.0000 0.0000 0 1 1"),
    (
        &["S-PER O S-LOC O S-ORG"],
        &["S-PER O S-LOC O O"],
        "1.0000 0.6667 0.8000 2 2 3",
    ),
    (&["B-PER E-PER"], &["I-PER E-PER"], "0.0000 0.0000 0.0000 0 0 1"),
    (&["S-PER O S-PER"], &["B-PER O E-PER"], "0.0000 0.0000 0.0000 0 0 2"),
    (
        &["B-PER I-PER E-PER S-LOC"],
        &["B-PER I-LOC E-PER S-LOC"],
        "1.0000 0.5000 0.6667 1 1 2",
    ),
    (
        &["S-PER B-PER E-PER"],
        &["B-PER B-PER E-PER"],
        "1.0000 0.5000 0.6667 1 1 2",
    ),
    (&["O S-ORG"], &["E-ORG S-ORG"], "1.0000 1.0000 1.0000 1 1 1"),
    (
        &["S-A O", "B-B E-B", "O O"],
        &["S-A O", "O O", "S-A O"],
        "0.5000 0.5000 0.5000 1 2 2",
    ),
    (&["S-X O O O"], &["S-X S-X S-X S-X"], "0.2500 1.0000 0.4000 1 4 1"),
    (&["S-A S-A S-A"], &["S-A S-B S-B"], "0.3333 0.3333 0.3333 1 3 3"),
    (
        &["S-A S-A S-A S-A S-A"],
        &["S-A S-A O O S-B"],
        "0.6667 0.4000 0.5000 2 3 5",
    ),
    (
        &["B-L I-L I-L I-L E-L"],
        &["B-L I-L I-L I-L E-L"],
        "1.0000 1.0000 1.0000 1 1 1",
    ),
    (&["B-A E-A B-A E-A"], &["B-A I-A I-A E-A"], "0.0000 0.0000 0.0000 0 1 2"),
    (&["O O", "O", "S-Z"], &["O O", "O", "S-Z"], "1.0000 1.0000 1.0000 1 1 1"),
    (
        &["S-A", "B-B E-B O"],
        &["B-A", "B-B E-B S-C"],
        "0.5000 0.5000 0.5000 1 2 2",
    ),
];

fn span_oracle() -> Outcome {
    let split =
        |s: &[&str]| -> Vec<Vec<String>> { s.iter().map(|x| x.split(' ').map(String::from).collect()).collect() };
    let mut wrong = Vec::new();
    for (i, (gold, pred, want)) in SPAN_CASES.iter().enumerate() {
        let report = span_f1(&split(gold), &split(pred)).unwrap();
        let got = report.render();
        if got.lines().next() != Some(*want) {
            wrong.push(format!("case {i}: got `{}`", got.lines().next().unwrap_or("")));
        }
    }
    outcome(
        wrong.is_empty(),
        if wrong.is_empty() {
            "20/20 hand-computed cases match".to_string()
        } else {
            wrong.join("; ")
        },
    )
}

const TRANSFER_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const MODES: [&str; 4] = ["la_dtl", "non_transfer", "la_mmd_only", "crf_l2_only"];

struct TransferRuns {
    /// Mode -> per-seed test F1.
    f1: BTreeMap<&'static str, Vec<f64>>,
    /// Mode -> per-sentence scores pooled over seeds.
    pooled: BTreeMap<&'static str, Vec<f64>>,
    archives: Vec<PathBuf>,
    secs: BTreeMap<&'static str, f64>,
}

fn transfer_runs(dir: &Path) -> TransferRuns {
    let data = dir.join("synth");
    run_ok(
        bin()
            .args([
                "gen-synth",
                "--seed",
                "1",
                "--shift-strength",
                "0.4",
                "--n-source",
                "2000",
            ])
            .args([
                "--n-target",
                "120",
                "--target-dev-frac",
                "0.5",
                "--n-target-test",
                "200",
                "--out",
            ])
            .arg(&data),
    );
    let test = read_column_file(data.join("target_test.txt"), Domain::Target).unwrap();
    let gold: Vec<Vec<String>> = test.iter().map(|s| s.labels.clone()).collect();
    let mut runs = TransferRuns {
        f1: BTreeMap::new(),
        pooled: BTreeMap::new(),
        archives: Vec::new(),
        secs: BTreeMap::new(),
    };
    for mode in MODES {
        let start = Instant::now();
        for seed in TRANSFER_SEEDS {
            let model = dir.join(format!("{mode}-{seed}.bin"));
            run_ok(
                bin()
                    .args(["train", "--config"])
                    .arg(data.join("run.conf"))
                    .args(["--mode", mode, "--seed", &seed.to_string(), "--threads", "1"])
                    .args(["--set", "d_emb=32", "--set", "d_lstm=32"])
                    .arg("--set")
                    .arg(format!("model_out={}", model.display())),
            );
            let (m, _) = archive::load(&model).unwrap();
            let pred = m.predict_all(&test, Domain::Target, 1).unwrap();
            runs.f1.entry(mode).or_default().push(span_f1(&gold, &pred).unwrap().f1);
            runs.pooled
                .entry(mode)
                .or_default()
                .extend(per_sentence_f1(&gold, &pred).unwrap());
            runs.archives.push(model);
        }
        runs.secs.insert(mode, start.elapsed().as_secs_f64());
    }
    runs
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn transfer_effect(runs: &TransferRuns) -> Outcome {
    let (la, nt) = (mean(&runs.f1["la_dtl"]), mean(&runs.f1["non_transfer"]));
    let p = randomization_test(&runs.pooled["la_dtl"], &runs.pooled["non_transfer"], 10_000, 1).unwrap();
    let secs = runs.secs["la_dtl"] + runs.secs["non_transfer"];
    outcome(
        (la - nt) * 100.0 >= 2.0 && p < 0.05,
        format!(
            "mean test F1 la_dtl {:.2} vs non_transfer {:.2} (+{:.2}), p = {p:.4}, {secs:.0}s",
            100.0 * la,
            100.0 * nt,
            100.0 * (la - nt)
        ),
    )
}

fn ablation(runs: &TransferRuns) -> Outcome {
    let m = |k: &str| 100.0 * mean(&runs.f1[k]);
    let (la, mmd, l2) = (m("la_dtl"), m("la_mmd_only"), m("crf_l2_only"));
    let pass = la >= mmd.max(l2) - 0.5;
    let seeds = |k: &str| {
        runs.f1[k]
            .iter()
            .map(|f| format!("{:.2}", 100.0 * f))
            .collect::<Vec<_>>()
            .join("/")
    };
    Outcome {
        pass,
        gating: false,
        detail: format!(
            "mean F1 la_dtl {la:.2}, la_mmd_only {mmd:.2}, crf_l2_only {l2:.2}{}; per seed la_dtl {}, la_mmd_only {}, crf_l2_only {}",
            if pass { "" } else { " (ordering violated, reported only)" },
            seeds("la_dtl"),
            seeds("la_mmd_only"),
            seeds("crf_l2_only"),
        ),
    }
}

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect()
}

fn determinism(dir: &Path) -> Outcome {
    let mut diffs = Vec::new();
    let synth = |d: &Path| {
        run_ok(
            bin()
                .args(["gen-synth", "--seed", "9", "--n-source", "200", "--out"])
                .arg(d),
        )
    };
    let (a, b) = (dir.join("det-a"), dir.join("det-b"));
    let (oa, ob) = (synth(&a), synth(&b));
    let strip = |m: BTreeMap<String, Vec<u8>>| -> BTreeMap<String, Vec<u8>> {
        m.into_iter().filter(|(k, _)| k != "run.conf").collect()
    };
    if oa != ob || strip(dir_bytes(&a)) != strip(dir_bytes(&b)) {
        diffs.push("gen-synth");
    }
    let train = |out: &Path| {
        run_ok(
            bin()
                .args(["train", "--config"])
                .arg(a.join("run.conf"))
                .args([
                    "--seed",
                    "4",
                    "--threads",
                    "1",
                    "--set",
                    "d_emb=16",
                    "--set",
                    "d_lstm=16",
                    "--set",
                    "max_epochs=3",
                ])
                .arg("--set")
                .arg(format!("model_out={}", out.display())),
        )
    };
    let (ma, mb) = (dir.join("det-a.bin"), dir.join("det-b.bin"));
    if train(&ma) != train(&mb) || std::fs::read(&ma).unwrap() != std::fs::read(&mb).unwrap() {
        diffs.push("train");
    }
    let eval = || {
        run_ok(
            bin()
                .args(["evaluate", "--model"])
                .arg(&ma)
                .arg("--against")
                .arg(&mb)
                .arg("--test")
                .arg(a.join("target_test.txt")),
        )
    };
    if eval() != eval() {
        diffs.push("evaluate");
    }
    let verify = || run_ok(bin().args(["verify", "--bound", "--gradcheck", "--trials", "3", "--seed", "2"]));
    if verify() != verify() {
        diffs.push("verify");
    }
    outcome(
        diffs.is_empty(),
        if diffs.is_empty() {
            "gen-synth, train, evaluate and verify repeat byte-identically".to_string()
        } else {
            format!("differs: {}", diffs.join(", "))
        },
    )
}

fn round_trips(archives: &[PathBuf]) -> Outcome {
    let mut bad = Vec::new();
    for p in archives {
        let bytes = std::fs::read(p).unwrap();
        let (model, hyper) = archive::from_bytes(&bytes).unwrap();
        if archive::to_bytes(&model, &hyper) != bytes {
            bad.push(p.display().to_string());
        }
    }
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/data");
    let mut files = 0;
    for e in std::fs::read_dir(data).unwrap() {
        let p = e.unwrap().path();
        let text = std::fs::read_to_string(&p).unwrap();
        let sents = parse_column_file(&text, Domain::Target).unwrap();
        let again = serialize_column(&sents);
        let canonical = !text.contains('#') && !text.contains('\r') && !text.contains("-DOCSTART-");
        if parse_column_file(&again, Domain::Target).unwrap() != sents || (canonical && again != text) {
            bad.push(p.display().to_string());
        }
        files += 1;
    }
    outcome(
        bad.is_empty(),
        if bad.is_empty() {
            format!(
                "{} archives save/load/save byte-identical, {files} corpus files round-trip",
                archives.len()
            )
        } else {
            format!("failed: {}", bad.join(", "))
        },
    )
}

fn main() {
    let tmp = TempDir::new().unwrap();
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |n: usize, name: &'static str, o: Outcome| {
        println!("[{}] {n:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };
    report(1, "crf exactness", crf_exactness());
    report(2, "probability normalization", normalization());
    report(3, "gradient check", gradcheck());
    report(4, "kl bound certificate", bound());
    report(5, "mmd correctness", mmd_correctness());
    report(6, "span f1 oracle", span_oracle());
    let runs = transfer_runs(tmp.path());
    report(7, "synthetic transfer effect", transfer_effect(&runs));
    report(8, "ablation ordering", ablation(&runs));
    report(9, "determinism", determinism(tmp.path()));
    report(10, "round trips", round_trips(&runs.archives));
    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    let gating: Vec<usize> = results
        .iter()
        .filter(|r| !r.2.pass && r.2.gating)
        .map(|r| r.0)
        .collect();
    println!("acceptance: {}/{} pass", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failing criteria: {failed:?} (gating: {gating:?})");
    }
    if !gating.is_empty() {
        std::process::exit(1);
    }
}
