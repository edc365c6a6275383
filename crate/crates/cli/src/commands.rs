//! Subcommand implementations.

use crate::config::{Precision, RunConfig};
use crate::{
    AblateArgs, BenchArgs, Cli, Command, EmbedArgs, EvalArgs, Failure, Format, GenSynthArgs,
    GradcheckArgs, GuidanceArg, ImageModeArg, IndexArgs, ModeArg, Preset, QueryArgs, SearchArgs,
    TrainArgs, ValidateArgs, EXIT_VALIDATION,
};
use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::{json, Value};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use ver_core::eval::{self, AblationConfig, SynthSpec};
use ver_core::gradcheck::{run_gradcheck, GradcheckConfig};
use ver_core::kb::{self, QueryRecord, Store, ValidationReport};
use ver_core::par;
use ver_core::retrieval::{self, EmbedOptions, ImageMode, IndexShard, SearchMode};
use ver_core::tensor::Real;
use ver_core::train::{self, StepRecord, TrainData, TrainHooks, TrainState};
use ver_core::vgka::{AdaptorConfig, Guidance};

struct Ctx {
    format: Format,
    seed: u64,
}

impl Ctx {
    /// Prints `value` with the seed attached, as JSON or through `table`.
    fn emit(&self, mut value: Value, table: impl FnOnce(&Value) -> String) {
        if let Value::Object(m) = &mut value {
            m.insert("seed".into(), json!(self.seed));
        }
        let text = match self.format {
            Format::Json => format!("{value}\n"),
            Format::Table => table(&value),
        };
        // a closed pipe (`| head`) is not an error worth reporting
        let _ = std::io::stdout().lock().write_all(text.as_bytes());
    }
}

fn default_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Sizes the global pool once, before any parallel work.
fn start_pool(threads: Option<usize>) -> Result<usize> {
    let n = threads.unwrap_or_else(default_threads);
    if n == 0 {
        return Err(Failure::validation("--threads must be >= 1").into());
    }
    par::init_global_threads(n);
    Ok(n)
}

pub fn run(cli: Cli) -> Result<()> {
    let Cli {
        threads,
        seed,
        format,
        command,
    } = cli;
    let ctx = |seed: u64| Ctx { format, seed };
    match command {
        Command::Train(a) => train_cmd(a, threads, seed, format),
        Command::Ablate(a) => ablate_cmd(a, threads, seed, format),
        other => {
            start_pool(threads)?;
            let c = ctx(seed.unwrap_or(0));
            match other {
                Command::GenSynth(a) => gen_synth(&c, a, seed),
                Command::EmbedKb(a) => embed_kb(&c, a),
                Command::Index(a) => index_cmd(&c, a),
                Command::Query(a) => query_cmd(&c, a),
                Command::Eval(a) => eval_cmd(&c, a),
                Command::Bench(a) => bench_cmd(&c, a),
                Command::Gradcheck(a) => gradcheck_cmd(&c, a),
                Command::Validate(a) => validate_cmd(&c, a),
                Command::Train(_) | Command::Ablate(_) => unreachable!("dispatched above"),
            }
        }
    }
}

fn to_value(v: &impl Serialize) -> Value {
    serde_json::to_value(v).expect("output serializes")
}

/// `key  value` lines for the top-level fields of an object.
fn kv_table(v: &Value) -> String {
    let mut s = String::new();
    if let Value::Object(m) = v {
        let w = m.keys().map(String::len).max().unwrap_or(0);
        for (k, x) in m {
            let shown = match x {
                Value::String(t) => t.clone(),
                other => other.to_string(),
            };
            let _ = writeln!(s, "{k:<w$}  {shown}");
        }
    }
    s
}

fn read_text(path: &Path, what: &str) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Failure::validation(format!("{what} {} does not exist", path.display())).into()
        } else {
            anyhow::Error::new(e).context(format!("reading {what} {}", path.display()))
        }
    })
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn gen_synth(ctx: &Ctx, a: GenSynthArgs, seed: Option<u64>) -> Result<()> {
    let mut spec = load_spec(a.preset, a.spec.as_deref())?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let kb = eval::gen_synthetic_kb(&spec)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let store_dir = a.out.join("store");
    let manifest = kb::write_store(&store_dir, kb.dims, &kb.bundles)?;
    kb::write_queries(&a.out.join("train.jsonl"), &kb.train)?;
    kb::write_queries(&a.out.join("eval.jsonl"), &kb.eval)?;
    std::fs::write(a.out.join("spec.toml"), toml::to_string(&spec)?)?;
    let c = Ctx {
        format: ctx.format,
        seed: spec.seed,
    };
    c.emit(
        json!({
            "command": "gen-synth",
            "out": a.out.display().to_string(),
            "entities": manifest.entity_count,
            "train_queries": kb.train.len(),
            "eval_queries": kb.eval.len(),
            "dims": kb.dims,
        }),
        kv_table,
    );
    Ok(())
}

/// The preset's settings, with any keys from the TOML file at `path` laid over them.
fn load_spec(preset: Preset, path: Option<&Path>) -> Result<SynthSpec> {
    let base = match preset {
        Preset::Default => SynthSpec::default(),
        Preset::Confusable => SynthSpec::confusable_pairs(SynthSpec::default().seed),
    };
    let Some(p) = path else { return Ok(base) };
    let text = read_text(p, "spec file")?;
    let table: toml::Table = toml::from_str(&text)
        .map_err(|e| Failure::validation(format!("spec file {}: {}", p.display(), e.message())))?;
    let mut merged = toml::Table::try_from(&base).expect("spec serializes");
    merged.extend(table);
    let spec: SynthSpec = merged.try_into().map_err(|e: toml::de::Error| {
        Failure::validation(format!("spec file {}: {}", p.display(), e.message()))
    })?;
    Ok(spec)
}

fn guidance_of(g: GuidanceArg) -> Guidance {
    match g {
        GuidanceArg::Both => Guidance::Both,
        GuidanceArg::ImageOnly => Guidance::ImageOnly,
        GuidanceArg::TextOnly => Guidance::TextOnly,
    }
}

fn load_run_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => {
            let text = read_text(p, "config file")?;
            RunConfig::from_toml(&text).map_err(|e| {
                Failure::validation(format!("config file {}: {}", p.display(), e.message())).into()
            })
        }
        None => Ok(RunConfig::default()),
    }
}

fn effective_train_config(
    a: &TrainArgs,
    threads: Option<usize>,
    seed: Option<u64>,
) -> Result<RunConfig> {
    let mut c = load_run_config(a.config.as_deref())?;
    if let Some(t) = threads {
        c.threads = Some(t);
    }
    c.threads = Some(c.threads.unwrap_or_else(default_threads));
    if let Some(s) = seed {
        c.train.seed = s;
    }
    let t = &mut c.train;
    let overrides = [
        (a.epochs, &mut t.epochs),
        (a.batch_size, &mut t.batch_size),
        (a.n_sync, &mut t.n_sync),
        (a.eval_every, &mut t.eval_every),
        (a.patience, &mut t.patience),
    ];
    for (flag, slot) in overrides {
        if let Some(v) = flag {
            *slot = v;
        }
    }
    if let Some(lr) = a.lr {
        t.lr = lr;
    }
    if let Some(cl) = a.clustered {
        t.clustered = cl;
    }
    if let Some(l) = a.layers {
        c.adaptor.layers = l;
    }
    if let Some(h) = a.heads {
        c.adaptor.heads = h;
    }
    if let Some(g) = a.guidance {
        c.adaptor.guidance = guidance_of(g);
    }
    if let Some(p) = a.precision {
        c.precision = p;
    }
    c.train.validate()?;
    if c.adaptor.layers == 0 || c.adaptor.heads == 0 {
        return Err(Failure::validation("adaptor layers and heads must be >= 1").into());
    }
    if c.train.eval_every > 0 && a.eval_queries.is_none() {
        return Err(Failure::validation("eval_every > 0 needs --eval-queries").into());
    }
    Ok(c)
}

fn train_cmd(
    a: TrainArgs,
    threads: Option<usize>,
    seed: Option<u64>,
    format: Format,
) -> Result<()> {
    let cfg = effective_train_config(&a, threads, seed)?;
    if a.dump_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    start_pool(cfg.threads)?;
    let store = Store::open(&a.store)?;
    let dims = store.dims();
    let adaptor = cfg.adaptor.resolve(dims.d_model, dims.d_text);
    adaptor.validate()?;
    let bundles = store.read_all()?;
    let queries = kb::read_queries(&a.queries)?;
    let eval_queries = a
        .eval_queries
        .as_deref()
        .map(kb::read_queries)
        .transpose()?;
    let ctx = Ctx {
        format,
        seed: cfg.train.seed,
    };
    match cfg.precision {
        Precision::F32 => train_run::<f32>(
            &ctx,
            &a,
            &cfg,
            adaptor,
            &bundles,
            &queries,
            eval_queries.as_deref(),
        ),
        Precision::F64 => train_run::<f64>(
            &ctx,
            &a,
            &cfg,
            adaptor,
            &bundles,
            &queries,
            eval_queries.as_deref(),
        ),
    }
}

fn train_run<T: Real>(
    ctx: &Ctx,
    a: &TrainArgs,
    cfg: &RunConfig,
    adaptor: AdaptorConfig,
    bundles: &[kb::FeatureBundle],
    queries: &[QueryRecord],
    eval_queries: Option<&[QueryRecord]>,
) -> Result<()> {
    let data = TrainData::<T>::new(bundles, queries)?;
    let state = TrainState::<T>::init(adaptor, &cfg.train)?;
    let log_path = sibling(&a.out, ".log.jsonl");
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut log = BufWriter::new(
        File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?,
    );
    let mut on_step = |r: &StepRecord| -> ver_core::Result<()> {
        writeln!(log, "{}", serde_json::to_string(r)?)?;
        Ok(())
    };
    let mut evaluate = |p: &ver_core::vgka::AdaptorParams<T>| -> ver_core::Result<f64> {
        let params = p.cast::<f32>();
        let (index, _) =
            retrieval::embed_kb(bundles, &params, EmbedOptions::default(), None, None)?;
        let rep = eval::eval_retrieval(
            &index,
            eval_queries.unwrap_or_default(),
            &[1],
            SearchMode::Exact,
        )?;
        Ok(rep.top1_overall)
    };
    let hooks = TrainHooks {
        on_step: Some(&mut on_step),
        evaluate: eval_queries
            .is_some()
            .then_some(&mut evaluate as &mut dyn FnMut(&_) -> ver_core::Result<f64>),
    };
    let out = train::train(&data, &cfg.train, state, hooks)?;
    log.flush()?;
    let last = out.records.last();
    let summary = json!({
        "steps": out.records.len(),
        "final_loss": last.map(|r| r.loss),
        "final_tau": last.map(|r| r.tau),
        "best_eval": out.best_eval,
        "stopped_early": out.stopped_early,
        "config": to_value(cfg),
    });
    train::save_checkpoint(
        &a.out,
        &out.state.to_checkpoint(cfg.train.seed),
        summary.clone(),
    )?;
    let config_path = sibling(&a.out, ".config.toml");
    std::fs::write(&config_path, cfg.to_toml())?;
    let mut v = json!({
        "command": "train",
        "checkpoint": a.out.display().to_string(),
        "log": log_path.display().to_string(),
        "config_file": config_path.display().to_string(),
        "threads": cfg.threads,
        "param_count": adaptor.param_count(),
    });
    if let (Value::Object(m), Value::Object(s)) = (&mut v, summary) {
        m.extend(s.into_iter().filter(|(k, _)| k != "config"));
    }
    ctx.emit(v, kv_table);
    Ok(())
}

fn embed_kb(ctx: &Ctx, a: EmbedArgs) -> Result<()> {
    if a.chunk == 0 {
        return Err(Failure::validation("--chunk must be >= 1").into());
    }
    let store = Store::open(&a.store)?;
    let ck = train::load_checkpoint::<f32>(&a.ckpt)?;
    let dims = store.dims();
    if ck.params.config.d_model != dims.d_model || ck.params.config.d_text != dims.d_text {
        return Err(Failure::validation(format!(
            "checkpoint expects D={} D_t={}, store has D={} D_t={}",
            ck.params.config.d_model, ck.params.config.d_text, dims.d_model, dims.d_text
        ))
        .into());
    }
    let resume = if a.resume && a.out.exists() {
        Some(retrieval::load_index(&a.out).context("loading the partial shard to resume from")?)
    } else {
        None
    };
    let bundles = store.read_all()?;
    let opts = EmbedOptions {
        image_mode: match a.image_mode {
            ImageModeArg::All => ImageMode::All,
            ImageModeArg::Primary => ImageMode::Primary,
        },
        chunk: a.chunk,
    };
    let out = a.out.clone();
    let mut save_partial = |s: &IndexShard, done: usize, total: usize| -> ver_core::Result<()> {
        if done < total {
            retrieval::save_index(&out, s)?;
        }
        Ok(())
    };
    let (shard, rep) = retrieval::embed_kb(
        &bundles,
        &ck.params,
        opts,
        resume.as_ref(),
        Some(&mut save_partial),
    )?;
    retrieval::save_index(&a.out, &shard)?;
    ctx.emit(
        json!({
            "command": "embed-kb",
            "index": a.out.display().to_string(),
            "entities": rep.entities,
            "rows": rep.rows,
            "resumed": rep.resumed,
            "skipped": rep.skipped,
            "threads": par::current_threads(),
        }),
        kv_table,
    );
    Ok(())
}

fn index_cmd(ctx: &Ctx, a: IndexArgs) -> Result<()> {
    let mut shard = retrieval::load_index(&a.index)?;
    match a.mode {
        ModeArg::Exact => shard.ivf = None,
        ModeArg::Ivf => {
            let rows = shard.len();
            let n_lists = a
                .n_lists
                .unwrap_or_else(|| ((rows as f64).sqrt().round() as usize).clamp(1, rows.max(1)));
            let n_probe = a.n_probe.unwrap_or((n_lists / 8).max(1));
            shard.build_ivf(n_lists, n_probe, ctx.seed)?;
        }
    }
    let out = a.out.unwrap_or(a.index);
    retrieval::save_index(&out, &shard)?;
    let ivf = shard.ivf.as_ref().map(|v| {
        let sizes: Vec<usize> = v.lists.iter().map(Vec::len).collect();
        json!({
            "n_lists": v.n_lists(),
            "n_probe": v.n_probe,
            "largest_list": sizes.iter().max(),
            "smallest_list": sizes.iter().min(),
        })
    });
    ctx.emit(
        json!({
            "command": "index",
            "index": out.display().to_string(),
            "rows": shard.len(),
            "entities": shard.entity_ids.len(),
            "ivf": ivf,
        }),
        kv_table,
    );
    Ok(())
}

fn search_mode(s: &SearchArgs, shard: &IndexShard) -> Result<SearchMode> {
    match s.mode {
        ModeArg::Exact => Ok(SearchMode::Exact),
        ModeArg::Ivf => {
            let ivf = shard.ivf.as_ref().ok_or_else(|| {
                Failure::validation(
                    "index has no inverted lists; build them with `index --mode ivf`",
                )
            })?;
            Ok(SearchMode::Ivf {
                n_probe: s.n_probe.unwrap_or(ivf.n_probe),
            })
        }
    }
}

fn parse_numbers(text: &str) -> Result<Vec<f32>> {
    let t = text.trim();
    if t.starts_with('[') {
        return serde_json::from_str(t)
            .map_err(|e| Failure::validation(format!("query vector: {e}")).into());
    }
    t.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f32>().map_err(|_| {
                Failure::validation(format!("query vector: {s:?} is not a number")).into()
            })
        })
        .collect()
}

fn query_cmd(ctx: &Ctx, a: QueryArgs) -> Result<()> {
    let shard = retrieval::load_index(&a.index)?;
    let path = Path::new(&a.query_vec);
    let vector = if path.is_file() {
        parse_numbers(&read_text(path, "query vector file")?)?
    } else {
        parse_numbers(&a.query_vec)?
    };
    let mode = search_mode(&a.search, &shard)?;
    let r = shard.search(&vector, a.k, mode)?;
    ctx.emit(
        json!({ "command": "query", "k": a.k, "search": mode, "hits": r.hits, "latency_ns": r.latency_ns }),
        |v| {
            let mut s = format!("{:>4}  {:<24} {:>10} {:>6}\n", "rank", "entity", "score", "image");
            for (i, h) in v["hits"].as_array().into_iter().flatten().enumerate() {
                let _ = writeln!(
                    s,
                    "{:>4}  {:<24} {:>10.6} {:>6}",
                    i + 1,
                    h["entity_id"].as_str().unwrap_or(""),
                    h["score"].as_f64().unwrap_or(f64::NAN),
                    h["image_id"]
                );
            }
            s
        },
    );
    Ok(())
}

fn eval_cmd(ctx: &Ctx, a: EvalArgs) -> Result<()> {
    let shard = retrieval::load_index(&a.index)?;
    let queries = kb::read_queries(&a.queries)?;
    let mode = search_mode(&a.search, &shard)?;
    let rep = eval::eval_retrieval(&shard, &queries, &a.ks, mode)?;
    let mut v = to_value(&rep);
    if let Value::Object(m) = &mut v {
        m.insert("command".into(), json!("eval"));
        m.insert("search".into(), to_value(&mode));
    }
    ctx.emit(v, |v| {
        let pct = |x: &Value| {
            x.as_f64()
                .map_or("absent".to_string(), |f| format!("{:.2}", 100.0 * f))
        };
        let mut s = String::new();
        let _ = writeln!(s, "top-1 seen     {}", pct(&v["top1_seen"]));
        let _ = writeln!(s, "top-1 unseen   {}", pct(&v["top1_unseen"]));
        let _ = writeln!(s, "top-1 overall  {}", pct(&v["top1_overall"]));
        let _ = writeln!(s, "harmonic mean  {}", pct(&v["hm"]));
        if let Some(r) = v["recall"].as_object() {
            let mut r: Vec<(&String, &Value)> = r.iter().collect();
            r.sort_by_key(|(k, _)| k.parse::<usize>().unwrap_or(usize::MAX));
            for (k, x) in r {
                let _ = writeln!(s, "recall@{k:<7} {}", pct(x));
            }
        }
        let _ = writeln!(s, "queries        {}", v["counts"]);
        for f in v["flags"].as_array().into_iter().flatten() {
            let _ = writeln!(s, "note           {}", f.as_str().unwrap_or(""));
        }
        s
    });
    Ok(())
}

fn bench_cmd(ctx: &Ctx, a: BenchArgs) -> Result<()> {
    let shard = retrieval::load_index(&a.index)?;
    let queries: Vec<Vec<f32>> = kb::read_queries(&a.queries)?
        .into_iter()
        .map(|q| q.vector)
        .collect();
    if queries.is_empty() {
        return Err(Failure::validation("query set is empty").into());
    }
    let mode = search_mode(&a.search, &shard)?;
    let stats = retrieval::bench_query(&shard, &queries, a.reps, a.k, mode)?;
    let mut scaling = Vec::new();
    for &t in &a.scaling {
        if t == 0 {
            return Err(Failure::validation("--scaling thread counts must be >= 1").into());
        }
        let s = par::with_threads(t, || {
            retrieval::bench_query(&shard, &queries, a.reps, a.k, mode)
        })?;
        scaling
            .push(json!({ "threads": t, "throughput_qps": s.throughput_qps, "p50_ns": s.p50_ns }));
    }
    if let Some(base) = scaling
        .first()
        .and_then(|s| s["throughput_qps"].as_f64())
        .filter(|&b| b > 0.0)
    {
        for s in &mut scaling {
            let q = s["throughput_qps"].as_f64().unwrap_or(0.0);
            s["speedup"] = json!(q / base);
        }
    }
    let mut v = to_value(&stats);
    if let Value::Object(m) = &mut v {
        m.insert("command".into(), json!("bench"));
        m.insert("search".into(), to_value(&mode));
        m.insert("k".into(), json!(a.k));
        m.insert("scaling".into(), Value::Array(scaling));
    }
    ctx.emit(v, |v| {
        let ms = |x: &Value| x.as_f64().unwrap_or(0.0) / 1e6;
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{} rows, {} queries x {} reps, {} threads",
            v["rows"], v["queries"], v["reps"], v["threads"]
        );
        let _ = writeln!(
            s,
            "p50 {:.3} ms  p95 {:.3} ms  mean {:.3} ms",
            ms(&v["p50_ns"]),
            ms(&v["p95_ns"]),
            ms(&v["mean_ns"])
        );
        let _ = writeln!(
            s,
            "throughput {:.1} q/s",
            v["throughput_qps"].as_f64().unwrap_or(0.0)
        );
        for x in v["scaling"].as_array().into_iter().flatten() {
            let _ = writeln!(
                s,
                "  {:>3} threads  {:>10.1} q/s  x{:.2}",
                x["threads"],
                x["throughput_qps"].as_f64().unwrap_or(0.0),
                x["speedup"].as_f64().unwrap_or(1.0)
            );
        }
        s
    });
    Ok(())
}

fn gradcheck_cmd(ctx: &Ctx, a: GradcheckArgs) -> Result<()> {
    let crate::DimsArg::Small = a.dims;
    let cfg = GradcheckConfig {
        seed: ctx.seed,
        ..GradcheckConfig::default()
    };
    let rep = run_gradcheck(&cfg)?;
    let mut v = to_value(&rep);
    if let Value::Object(m) = &mut v {
        m.insert("command".into(), json!("gradcheck"));
        m.insert("tolerance".into(), json!(cfg.tolerance));
    }
    ctx.emit(v, kv_table);
    if !rep.passed {
        return Err(Failure {
            code: EXIT_VALIDATION,
            kind: "gradcheck",
            message: format!(
                "max relative error {:.3e} in {}[{}] exceeds {:.0e}",
                rep.max_rel_error, rep.worst_tensor, rep.worst_index, cfg.tolerance
            ),
        }
        .into());
    }
    Ok(())
}

fn validate_cmd(ctx: &Ctx, a: ValidateArgs) -> Result<()> {
    let (kind, rep): (&str, ValidationReport) = match (&a.store, &a.index) {
        (Some(p), _) => ("store", kb::validate_store(p)?),
        (_, Some(p)) => ("index", retrieval::validate_index(p)?),
        (None, None) => unreachable!("clap requires one of --store and --index"),
    };
    let clean = rep.is_clean();
    let mut v = to_value(&rep);
    if let Value::Object(m) = &mut v {
        m.insert("command".into(), json!("validate"));
        m.insert("kind".into(), json!(kind));
        m.insert("clean".into(), json!(clean));
    }
    ctx.emit(v, |v| {
        let mut s = format!(
            "{} {}: {} records checked, {} findings\n",
            kind,
            v["path"].as_str().unwrap_or(""),
            v["records_checked"],
            v["findings"].as_array().map_or(0, Vec::len)
        );
        for f in v["findings"].as_array().into_iter().flatten() {
            let _ = writeln!(
                s,
                "  byte {:>10}  {:<16} {}",
                f["offset"],
                f["record"].as_str().unwrap_or("-"),
                f["message"].as_str().unwrap_or("")
            );
        }
        s
    });
    if !clean {
        let first = &rep.findings[0];
        return Err(Failure::validation(format!(
            "{} finding(s) in {}; first at byte {}: {}",
            rep.findings.len(),
            rep.path,
            first.offset,
            first.message
        ))
        .into());
    }
    Ok(())
}

fn ablate_cmd(
    a: AblateArgs,
    threads: Option<usize>,
    seed: Option<u64>,
    format: Format,
) -> Result<()> {
    let mut cfg = load_run_config(a.config.as_deref())?;
    if a.config.is_none() {
        cfg.adaptor.heads = 4;
        cfg.train.batch_size = 32;
        cfg.train.lr = 3e-3;
    }
    cfg.train.epochs = a.epochs;
    cfg.train.validate()?;
    if a.seeds.is_empty() {
        return Err(Failure::validation("--seeds is empty").into());
    }
    start_pool(threads.or(cfg.threads))?;
    let spec = load_spec(a.preset, a.spec.as_deref())?;
    let adaptor = cfg.adaptor.resolve(spec.d_model, spec.d_text);
    adaptor.validate()?;
    let configs: Vec<AblationConfig> = eval::default_ablation_configs()
        .into_iter()
        .filter(|c| !a.grid_only || c.guidance == Guidance::Both)
        .collect();
    let table = eval::ablation_run(&spec, adaptor, &cfg.train, &configs, &a.seeds)?;
    if let Some(p) = &a.csv {
        std::fs::write(p, table.to_csv()).with_context(|| format!("writing {}", p.display()))?;
    }
    let cmp = table.compare("full", "vanilla");
    let ctx = Ctx {
        format,
        seed: seed.unwrap_or(0),
    };
    let rendered = table.render();
    ctx.emit(
        json!({ "command": "ablate", "rows": table.rows, "full_vs_vanilla": cmp, "seeds": a.seeds }),
        |v| format!("{rendered}full vs vanilla: {}\n", v["full_vs_vanilla"]),
    );
    Ok(())
}
