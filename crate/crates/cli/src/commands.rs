use std::collections::BTreeSet;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use meki::analysis::{self, RunStatus};
use meki::numerics::{DType, Scalar};
use meki::reparam::{self, BankDType, InferenceSession};
use meki::trainer::{self, generate_corpus};
use meki::{storage, Error, KvMap, Model, ModelConfig, Result, SyntheticCorpusSpec, TrainConfig};

use crate::manifest::Manifest;
use crate::{CostArgs, InferArgs, LensArgs, ReparamArgs, SweepArgs, TrainArgs, VerifyArgs};

fn load_kv(path: &Path) -> Result<KvMap> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let kv = KvMap::parse(&text)?;
    let mut known: BTreeSet<String> = BTreeSet::new();
    for map in [
        ModelConfig::toy().to_kv(),
        TrainConfig::toy().to_kv(),
        SyntheticCorpusSpec::toy().to_kv(),
    ] {
        known.extend(map.keys().map(str::to_string));
    }
    known.insert("dtype".into());
    for key in kv.keys().filter(|k| !known.contains(*k)) {
        log::warn!("{}: ignoring unknown key `{key}`", path.display());
    }
    Ok(kv)
}

struct RunSettings {
    model: ModelConfig,
    train: TrainConfig,
    corpus: SyntheticCorpusSpec,
    dtype: DType,
}

fn run_settings(kv: &KvMap, seed: Option<u64>) -> Result<RunSettings> {
    let model = ModelConfig::from_kv(kv)?;
    model.validate()?;
    let mut train = TrainConfig::from_kv(kv)?;
    let mut corpus = SyntheticCorpusSpec::from_kv(kv)?;
    if let Some(s) = seed {
        train.seed = s;
        corpus.seed = s;
    }
    corpus.vocab_size = model.vocab_size;
    train.validate()?;
    corpus.validate()?;
    Ok(RunSettings {
        model,
        train,
        corpus,
        dtype: kv.get_or("dtype", DType::F32)?,
    })
}

fn create_file(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn train_as<S: Scalar>(run: &RunSettings, corpus: &meki::Corpus, ckpt: &Path) -> Result<(f64, Vec<trainer::LossRecord>)> {
    let out = trainer::train::<S>(&run.model, &run.train, corpus)?;
    storage::save_checkpoint(&out.model, ckpt)?;
    Ok((out.final_val_loss, out.history))
}

pub fn train(args: TrainArgs) -> Result<u8> {
    let kv = load_kv(&args.config)?;
    let run = run_settings(&kv, args.seed)?;
    let mut manifest = Manifest::start("train").config(&args.config).seed(run.train.seed);
    std::fs::create_dir_all(&args.out)?;
    let corpus = generate_corpus(&run.corpus)?;
    let ckpt = args.out.join("model.ckpt");
    let (final_val, history) = match run.dtype {
        DType::F32 => train_as::<f32>(&run, &corpus, &ckpt)?,
        DType::F64 => train_as::<f64>(&run, &corpus, &ckpt)?,
    };
    let loss_csv = args.out.join("loss.csv");
    trainer::write_history_csv(&history, create_file(&loss_csv)?)?;

    let bayes = run.corpus.bayes_cross_entropy();
    println!("checkpoint       {}", ckpt.display());
    println!("steps            {}", run.train.steps);
    println!("final_val_loss   {final_val:.6}");
    println!("bayes_loss       {bayes:.6}");
    manifest.input(&args.config);
    manifest.artifact(&ckpt);
    manifest.artifact(&loss_csv);
    manifest.note("dtype", run.dtype.to_string());
    manifest.note("final_val_loss", final_val);
    manifest.finish(&args.out)?;
    Ok(0)
}

pub fn reparam(args: ReparamArgs) -> Result<u8> {
    let mut manifest = Manifest::start("reparam");
    let model: Model<f64> = storage::load_checkpoint(&args.ckpt)?;
    let provenance = storage::file_hash(&args.ckpt)?;
    let bank = reparam::fold_model(&model, args.dtype, provenance)?;
    storage::save_bank(&bank, &args.out)?;
    println!("bank             {}", args.out.display());
    println!("layers           {}", bank.n_layers());
    println!("vocab_size       {}", bank.vocab_size());
    println!("d_mem            {}", bank.d_mem());
    println!("dtype            {}", bank.dtype());
    println!("payload_bytes    {}", bank.payload_bytes());
    println!("provenance       {provenance:016x}");
    manifest.input(&args.ckpt);
    manifest.artifact(&args.out);
    manifest.note("dtype", args.dtype.to_string());
    manifest.finish(&parent_dir(&args.out))?;
    Ok(0)
}

fn verify_as<S: Scalar>(args: &VerifyArgs, bank: &meki::FusedBank, hash: u64) -> Result<reparam::EquivalenceReport> {
    let model: Model<S> = storage::load_checkpoint(&args.ckpt)?;
    InferenceSession::new(&model, bank, hash, args.allow_mismatch)?;
    let seq_len = args.seq_len.min(model.config.max_seq_len);
    reparam::verify_equivalence(&model, bank, args.sequences, seq_len, args.tol, args.seed)
}

pub fn verify(args: VerifyArgs) -> Result<u8> {
    let mut manifest = Manifest::start("verify").seed(args.seed);
    let bank = storage::load_bank(&args.bank)?;
    let hash = storage::file_hash(&args.ckpt)?;
    let dtype = args.dtype.unwrap_or(match bank.dtype() {
        BankDType::F64 => DType::F64,
        _ => DType::F32,
    });
    let report = match dtype {
        DType::F32 => verify_as::<f32>(&args, &bank, hash)?,
        DType::F64 => verify_as::<f64>(&args, &bank, hash)?,
    };
    println!("sequences        {} x {}", report.n_sequences, report.seq_len);
    println!("precision        {dtype}, bank {}", bank.dtype());
    for (l, d) in report.per_layer_max_diff.iter().enumerate() {
        println!("layer {l:<10} max_abs_diff {d:.3e}");
    }
    println!("max_abs_diff     {:.3e}", report.max_abs_diff_logits);
    println!("tolerance        {:.3e}", report.tol);
    println!("{}", if report.pass { "PASS" } else { "FAIL" });
    manifest.input(&args.ckpt);
    manifest.input(&args.bank);
    manifest.note("max_abs_diff_logits", report.max_abs_diff_logits);
    manifest.note("pass", report.pass);
    manifest.finish(&args.out_dir)?;
    Ok(if report.pass { 0 } else { 1 })
}

pub fn infer(args: InferArgs) -> Result<u8> {
    let mut manifest = Manifest::start("infer");
    let bank = storage::load_bank(&args.bank)?;
    let model: Model<f32> = storage::load_checkpoint(&args.ckpt)?;
    let hash = storage::file_hash(&args.ckpt)?;
    let session = InferenceSession::new(&model, &bank, hash, args.allow_mismatch)?;
    let out = session.generate(&args.tokens, args.greedy)?;
    let joined: Vec<String> = out.iter().map(usize::to_string).collect();
    println!("{}", joined.join(","));
    manifest.input(&args.ckpt);
    manifest.input(&args.bank);
    manifest.note("prompt", args.tokens);
    manifest.note("output", out);
    manifest.finish(&args.out_dir)?;
    Ok(0)
}

pub fn cost(args: CostArgs) -> Result<u8> {
    let mut manifest = Manifest::start("cost").config(&args.config);
    let kv = load_kv(&args.config)?;
    let cfg = ModelConfig::from_kv(&kv)?;
    let report = analysis::cost_model(&cfg, args.dtype)?;
    println!("train_macs_per_token_per_layer  {}", report.train_macs_per_token_per_layer);
    println!("infer_macs_per_token_per_layer  {}", report.infer_macs_per_token_per_layer);
    println!("train_flops_per_token_per_layer {}", 2 * report.train_macs_per_token_per_layer);
    println!("infer_flops_per_token_per_layer {}", 2 * report.infer_macs_per_token_per_layer);
    println!("rom_bytes_per_token             {}", report.rom_bytes_per_token_full_depth);
    println!("memory_weights                  {}", report.memory_weight_count);
    if report.approximate {
        println!("note: odd d_model, projector width floored");
    }
    let csv = args.out_dir.join("cost.csv");
    {
        use std::io::Write;
        let mut w = create_file(&csv)?;
        writeln!(w, "{}", analysis::CostReport::CSV_HEADER)?;
        writeln!(w, "{}", report.csv_row())?;
        w.flush()?;
    }
    manifest.input(&args.config);
    manifest.artifact(&csv);
    manifest.finish(&args.out_dir)?;
    Ok(0)
}

pub fn sweep(args: SweepArgs) -> Result<u8> {
    let kv = load_kv(&args.config)?;
    let run = run_settings(&kv, args.seed)?;
    let seeds = if args.seeds.is_empty() { vec![run.train.seed] } else { args.seeds.clone() };
    let mut manifest = Manifest::start("sweep").config(&args.config).seed(run.train.seed);
    let corpus = generate_corpus(&run.corpus)?;
    let report = match run.dtype {
        DType::F32 => analysis::dmem_sweep::<f32>(&run.model, &args.dmem, &run.train, &corpus, &seeds)?,
        DType::F64 => analysis::dmem_sweep::<f64>(&run.model, &args.dmem, &run.train, &corpus, &seeds)?,
    };
    for r in &report.rows {
        let loss = r.mean_val_loss.map(|l| format!("{l:.6}")).unwrap_or_else(|| "-".into());
        let status = match &r.status {
            RunStatus::Ok => "ok".to_string(),
            RunStatus::Failed(e) => format!("failed ({e})"),
        };
        println!("d_mem {:<5} weights {:<10} val_loss {loss:<10} {status}", r.d_mem, r.memory_weights);
    }
    if let Some(fit) = report.fit {
        println!("fit: loss = {:.5} - {:.5} ln(weights), r2 {:.4}", fit.a, fit.b, fit.r2);
    }
    let csv = args.out_dir.join("sweep.csv");
    analysis::write_sweep_csv(&report, create_file(&csv)?)?;
    manifest.input(&args.config);
    manifest.artifact(&csv);
    manifest.note("seeds", seeds);
    manifest.finish(&args.out_dir)?;
    Ok(0)
}

pub fn lens(args: LensArgs) -> Result<u8> {
    let mut manifest = Manifest::start("lens");
    let model: Model<f64> = storage::load_checkpoint(&args.ckpt)?;
    let baseline: Option<Model<f64>> = args.baseline.as_ref().map(storage::load_checkpoint).transpose()?;
    let kv = match &args.config {
        Some(p) => {
            manifest = manifest.config(p);
            manifest.input(p);
            load_kv(p)?
        }
        None => KvMap::default(),
    };
    let mut spec = SyntheticCorpusSpec::from_kv(&kv)?;
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    spec.vocab_size = model.config.vocab_size;
    manifest = manifest.seed(spec.seed);
    let corpus = generate_corpus(&spec)?;
    let seq_len = args.seq_len.min(model.config.max_seq_len);

    let mut reports = vec![("model", analysis::logit_lens_kl(&model, &corpus.val, args.sequences, seq_len)?)];
    if let Some(b) = &baseline {
        reports.push(("baseline", analysis::logit_lens_kl(b, &corpus.val, args.sequences, seq_len)?));
    }
    for (name, r) in &reports {
        println!("{name} ({} positions)", r.positions);
        for l in &r.layers {
            println!("  layer {:<4} kl_final_lens {:.5} kl_lens_final {:.5}", l.layer, l.kl_final_lens, l.kl_lens_final);
        }
    }
    let csv = args.out_dir.join("lens.csv");
    let refs: Vec<(&str, &analysis::LensReport)> = reports.iter().map(|(n, r)| (*n, r)).collect();
    analysis::write_lens_csv(&refs, create_file(&csv)?)?;
    manifest.input(&args.ckpt);
    if let Some(b) = &args.baseline {
        manifest.input(b);
    }
    manifest.artifact(&csv);
    manifest.finish(&args.out_dir)?;
    Ok(0)
}

pub fn bank_inspect(bank: &Path, out_dir: &Path) -> Result<u8> {
    let mut manifest = Manifest::start("bank-inspect");
    print!("{}", storage::inspect_bank(bank)?);
    manifest.input(bank);
    manifest.finish(out_dir)?;
    Ok(0)
}
