//! The four subcommands. Each writes its report to `out`; warnings go to `err`.

use std::io::Write;
use std::path::{Path, PathBuf};

use seqtransfer::corpus::{
    build_label_map, gen_synthetic, load_embeddings, parse_label_map_file, read_column_file, serialize_column, Domain,
    LabelMap, LabelScheme, LabeledSentence, SynthSpec,
};
use seqtransfer::eval::{per_sentence_f1, randomization_test, span_f1, F1Report};
use seqtransfer::numerics::stream_rng;
use seqtransfer::strategy::StrategyRegistry;
use seqtransfer::trainer::{char_vocab, train, training_tokens, Model, TrainData, TrainRecord};
use seqtransfer::{Error, Result};

use crate::archive;
use crate::config::RunConfig;
use crate::verify;

fn io_err(e: std::io::Error) -> Error {
    Error::Io {
        path: "<output>".into(),
        msg: e.to_string(),
    }
}

macro_rules! emit {
    ($w:expr, $($arg:tt)*) => {
        writeln!($w, $($arg)*).map_err(io_err)?
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenSynthArgs {
    pub seed: u64,
    pub out: PathBuf,
    pub n_source: usize,
    /// Target sentences split into train and dev.
    pub n_target: usize,
    pub target_dev_frac: f64,
    pub n_target_test: usize,
    pub n_types: usize,
    pub vocab_size: usize,
    pub shift_strength: f64,
}

impl Default for GenSynthArgs {
    fn default() -> Self {
        let spec = SynthSpec::default();
        GenSynthArgs {
            seed: 1,
            out: PathBuf::from("synth"),
            n_source: spec.n_source,
            n_target: 120,
            target_dev_frac: 0.5,
            n_target_test: 200,
            n_types: spec.n_types,
            vocab_size: spec.vocab_size,
            shift_strength: spec.shift_strength,
        }
    }
}

pub const SOURCE_TRAIN: &str = "source_train.txt";
pub const TARGET_TRAIN: &str = "target_train.txt";
pub const TARGET_DEV: &str = "target_dev.txt";
pub const TARGET_TEST: &str = "target_test.txt";
pub const SCHEME: &str = "scheme.txt";
pub const LABEL_MAP: &str = "label_map.txt";
pub const RUN_CONFIG: &str = "run.conf";

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes a synthetic source/target pair split into train/dev/test files.
pub fn gen_synth(args: &GenSynthArgs, out: &mut dyn Write) -> Result<()> {
    if !(0.0..=1.0).contains(&args.target_dev_frac) {
        return Err(Error::Usage("--target-dev-frac must lie in [0, 1]".into()));
    }
    let spec = SynthSpec {
        n_source: args.n_source,
        n_target: args.n_target + args.n_target_test,
        n_types: args.n_types,
        vocab_size: args.vocab_size,
        shift_strength: args.shift_strength,
    };
    let corpus = gen_synthetic(args.seed, &spec)?;
    let n_dev = (args.n_target as f64 * args.target_dev_frac).round() as usize;
    let n_train = args.n_target - n_dev;
    let (train_t, rest) = corpus.target.split_at(n_train);
    let (dev_t, test_t) = rest.split_at(n_dev);

    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let dir = &args.out;
    let header = &corpus.header;
    let files = [
        (SOURCE_TRAIN, &corpus.source[..]),
        (TARGET_TRAIN, train_t),
        (TARGET_DEV, dev_t),
        (TARGET_TEST, test_t),
    ];
    for (name, sents) in files {
        write_file(&dir.join(name), &format!("{header}{}", serialize_column(sents)))?;
    }
    write_file(&dir.join(SCHEME), &corpus.scheme.to_text())?;
    write_file(&dir.join(LABEL_MAP), &LabelMap::identity(&corpus.scheme).to_text())?;
    let conf = format!(
        "source_train = {}\ntarget_train = {}\ntarget_dev = {}\ntarget_test = {}\nsource_scheme = {}\ntarget_scheme = {}\nlabel_map = {}\n",
        dir.join(SOURCE_TRAIN).display(),
        dir.join(TARGET_TRAIN).display(),
        dir.join(TARGET_DEV).display(),
        dir.join(TARGET_TEST).display(),
        dir.join(SCHEME).display(),
        dir.join(SCHEME).display(),
        dir.join(LABEL_MAP).display(),
    );
    write_file(&dir.join(RUN_CONFIG), &conf)?;

    emit!(out, "seed {}", args.seed);
    emit!(
        out,
        "n_source {} n_target_train {} n_target_dev {} n_target_test {} n_types {} vocab_size {} shift_strength {}",
        corpus.source.len(),
        train_t.len(),
        dev_t.len(),
        test_t.len(),
        spec.n_types,
        spec.vocab_size,
        spec.shift_strength
    );
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn scheme_for(file: Option<&PathBuf>, corpora: &[&[LabeledSentence]]) -> Result<LabelScheme> {
    match file {
        Some(p) => LabelScheme::parse(&read_text(p)?),
        None => LabelScheme::infer(corpora.iter().flat_map(|c| c.iter().map(|s| s.labels.as_slice()))),
    }
}

/// Label map from a file, else identity on equal schemes, else pairs of same-named types.
fn label_map_for(file: Option<&PathBuf>, source: &LabelScheme, target: &LabelScheme) -> Result<LabelMap> {
    let pairs = match file {
        Some(p) => parse_label_map_file(&read_text(p)?)?,
        None => source
            .entity_types()
            .iter()
            .filter(|t| target.has_type(t))
            .map(|t| (t.clone(), t.clone()))
            .collect(),
    };
    build_label_map(source, target, &pairs)
}

/// Every label type in `sents` must exist in `scheme`.
fn check_scheme(sents: &[LabeledSentence], scheme: &LabelScheme, what: &str) -> Result<()> {
    for s in sents {
        for l in &s.labels {
            if scheme.index_of(l).is_err() {
                return Err(Error::Config(format!(
                    "{what} uses tag `{l}`, which the model's scheme lacks"
                )));
            }
        }
    }
    Ok(())
}

/// Trains per `cfg`, writes the archive and the per-epoch record.
pub fn train_cmd(mut cfg: RunConfig, out: &mut dyn Write, err: &mut dyn Write) -> Result<TrainRecord> {
    let registry = StrategyRegistry::default();
    let strategy = registry.get(&cfg.hyper.mode)?;
    for w in strategy.constrain(&mut cfg.hyper) {
        emit!(err, "warning: {w}");
    }
    for w in cfg.validate_for_training(strategy.uses_source())? {
        emit!(err, "warning: {w}");
    }
    let mut hyper = cfg.hyper.clone();
    let path = |p: &Option<PathBuf>| p.clone().expect("validated");
    let source = match (&cfg.source_train, strategy.uses_source()) {
        (Some(p), true) => read_column_file(p, Domain::Source)?,
        _ => Vec::new(),
    };
    let target = read_column_file(path(&cfg.target_train), Domain::Target)?;
    let dev = read_column_file(path(&cfg.target_dev), Domain::Target)?;

    let target_scheme = scheme_for(cfg.target_scheme.as_ref(), &[&target, &dev])?;
    let source_scheme = if strategy.uses_source() {
        scheme_for(cfg.source_scheme.as_ref(), &[&source])?
    } else {
        target_scheme.clone()
    };
    check_scheme(&target, &target_scheme, "target_train")?;
    check_scheme(&dev, &target_scheme, "target_dev")?;
    check_scheme(&source, &source_scheme, "source_train")?;
    let label_map = if strategy.uses_source() {
        label_map_for(cfg.label_map.as_ref(), &source_scheme, &target_scheme)?
    } else {
        LabelMap::identity(&target_scheme)
    };

    let tokens = training_tokens(strategy, &source, &target);
    let model = match &cfg.embeddings {
        Some(p) => {
            let table = load_embeddings(
                p,
                tokens.iter().copied(),
                &mut stream_rng(hyper.seed, "init/embeddings"),
            )?;
            if table.dim() != hyper.d_emb {
                emit!(err, "warning: d_emb set to {} to match {}", table.dim(), p.display());
                hyper.d_emb = table.dim();
            }
            let chars = (hyper.d_char > 0).then(|| char_vocab(&tokens));
            Model::new(&hyper, table, chars, source_scheme, target_scheme, label_map)?
        }
        None => Model::from_tokens(&hyper, &tokens, source_scheme, target_scheme, label_map)?,
    };

    emit!(out, "# seed {} mode {}", hyper.seed, strategy.name());
    let data = TrainData {
        source: &source,
        target: &target,
        dev: &dev,
    };
    let mut write_err = None;
    let (model, record) = train(model, &hyper, strategy, &data, cfg.threads, &mut |e| {
        if let Err(x) = writeln!(out, "{}", e.progress_line()) {
            write_err.get_or_insert(x);
        }
    })?;
    if let Some(e) = write_err {
        return Err(io_err(e));
    }
    let model_out = path(&cfg.model_out);
    archive::save(&model_out, &model, &hyper)?;
    let record_out = cfg
        .record_out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.record", model_out.display())));
    write_file(&record_out, &record.to_string())?;
    emit!(
        out,
        "# best_epoch {} dev_f1 {:.6}",
        record.best_epoch,
        record.best_dev_f1()
    );
    Ok(record)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluateArgs {
    pub model: PathBuf,
    pub test: PathBuf,
    pub second_model: Option<PathBuf>,
    pub iterations: usize,
    pub seed: u64,
    pub threads: usize,
}

/// F1 of one model, and the paired p-value when a second model is given.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub reports: Vec<F1Report>,
    pub p_value: Option<f64>,
}

fn predict_with(path: &Path, test: &[LabeledSentence], threads: usize) -> Result<Vec<Vec<String>>> {
    let (model, _) = archive::load(path)?;
    check_scheme(test, &model.target_scheme, "the test corpus").map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("scheme mismatch with {}: {m}", path.display())),
        other => other,
    })?;
    model.predict_all(test, Domain::Target, threads)
}

pub fn evaluate_cmd(args: &EvaluateArgs, out: &mut dyn Write) -> Result<Evaluation> {
    let test = read_column_file(&args.test, Domain::Target)?;
    let gold: Vec<Vec<String>> = test.iter().map(|s| s.labels.clone()).collect();
    let mut models = vec![args.model.clone()];
    models.extend(args.second_model.clone());
    emit!(out, "# seed {}", args.seed);
    let mut reports = Vec::new();
    let mut scores = Vec::new();
    for m in &models {
        let pred = predict_with(m, &test, args.threads)?;
        let report = span_f1(&gold, &pred)?;
        emit!(out, "model {}", m.display());
        write!(out, "{}", report.render()).map_err(io_err)?;
        scores.push(per_sentence_f1(&gold, &pred)?);
        reports.push(report);
    }
    let p_value = match scores.as_slice() {
        [a, b] => {
            let p = randomization_test(a, b, args.iterations, args.seed)?;
            emit!(out, "p_value {p:.6}");
            Some(p)
        }
        _ => None,
    };
    Ok(Evaluation { reports, p_value })
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyArgs {
    pub gradcheck: bool,
    pub bound: bool,
    pub trials: usize,
    pub seed: u64,
}

/// Runs the requested checks; `Ok(false)` when any of them fails.
pub fn verify_cmd(args: &VerifyArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<bool> {
    if !args.gradcheck && !args.bound {
        return Err(Error::Usage("verify needs --gradcheck and/or --bound".into()));
    }
    emit!(out, "# seed {}", args.seed);
    if args.trials == 0 {
        emit!(err, "warning: --trials 0 checks nothing; reporting a vacuous pass");
    }
    let mut ok = true;
    if args.gradcheck {
        for s in verify::gradcheck(args.seed, args.trials)? {
            emit!(out, "{}", s.to_line());
            if !s.passed() {
                ok = false;
                emit!(out, "# {} failing trials: {:?}", s.name, s.failing_trials());
            }
        }
    }
    if args.bound {
        let certs = verify::bound_trials(args.seed, args.trials)?;
        let mut failed = Vec::new();
        for (i, c) in certs.iter().enumerate() {
            emit!(out, "{}", c.to_line());
            if !c.passed() {
                failed.push(i);
            }
        }
        let passed = certs.len() - failed.len();
        emit!(out, "bound {passed}/{} pass", certs.len());
        if !failed.is_empty() {
            ok = false;
            emit!(out, "# failing instances: {failed:?}");
        }
        if args.trials > 0 {
            let sweep = verify::delta_sweep(args.seed)?;
            for (delta, c) in &sweep {
                emit!(
                    out,
                    "sweep {delta:e} {:.16e} {:.16e} {:.16e}",
                    c.exact_kl,
                    c.bound,
                    c.exact_kl / c.bound
                );
            }
            let mono = verify::sweep_ratio_decreases(&sweep);
            emit!(
                out,
                "sweep ratio {}",
                if mono { "decreasing" } else { "NOT decreasing" }
            );
            ok &= mono;
        }
    }
    emit!(out, "{}", if ok { "all checks passed" } else { "FAILED" });
    Ok(ok)
}
