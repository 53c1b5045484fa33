use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::{json, Value};

use webctx::dom::{DatasetManifest, LabelTable, PruneConfig, Webpage};
use webctx::eval::{cross_domain_accuracy, make_folds, ClassAccuracy, FoldSplit};
use webctx::features::{feature_matrix, FeatureManifest, TagVocabulary, DEFAULT_VOCAB_SIZE};
use webctx::graph::{build_graph_with, GraphMetric};
use webctx::model::Model;
use webctx::synth::{write_dataset, SynthSpec};
use webctx::train::{
    init_model, mean_std, predict_pages, train_with_log, truth_of, RoiCache, TrainConfig,
};
use webctx::viz::render_attention;

use crate::{resolve, Cli, Command, DataArgs, GraphOverride, Invalid};

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Ingest(a) => ingest(cli, a),
        Command::Synth(a) => synth(cli, a),
        Command::BuildGraph(a) => build_graph(cli, a),
        Command::Train(a) => train(cli, a),
        Command::Eval(a) => eval(cli, a),
        Command::Predict(a) => predict(cli, a),
        Command::Viz(a) => viz(cli, a),
    }
}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

/// Reproducibility record written next to every output.
#[derive(Serialize)]
struct Stamp<C: Serialize> {
    tool: &'static str,
    version: &'static str,
    argv: Vec<String>,
    seed: Option<u64>,
    config: C,
    dataset_sha256: Option<String>,
}

fn write_stamp<C: Serialize>(
    path: &Path,
    seed: Option<u64>,
    config: C,
    dataset_sha256: Option<String>,
) -> Result<()> {
    let stamp = Stamp {
        tool: "webctx",
        version: env!("CARGO_PKG_VERSION"),
        argv: std::env::args().collect(),
        seed,
        config,
        dataset_sha256,
    };
    write_json(path, &stamp)
}

/// `<file>.stamp.json` beside a single-file output.
fn stamp_beside(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".stamp.json");
    PathBuf::from(s)
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut w =
        BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Missing inputs are the caller's mistake, not a runtime failure.
fn existing(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(invalid(format!("{} does not exist", path.display())))
    }
}

fn read_text(path: &Path) -> Result<String> {
    let path = existing(path.to_path_buf())?;
    std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))
}

fn load_data(cli: &Cli, args: &DataArgs) -> Result<(DatasetManifest, Vec<Webpage>)> {
    let path = existing(resolve(&cli.workdir, &args.data))?;
    let manifest = DatasetManifest::open(&path)
        .with_context(|| format!("dataset manifest {}", path.display()))?;
    let labels_path = match &args.labels {
        Some(p) => Some(existing(resolve(&cli.workdir, p))?),
        None => Some(manifest.base_dir.join("labels.csv")).filter(|p| p.exists()),
    };
    let labels = match labels_path {
        Some(p) => {
            let f = File::open(&p).with_context(|| format!("label manifest {}", p.display()))?;
            Some(LabelTable::read(f).with_context(|| format!("label manifest {}", p.display()))?)
        }
        None => None,
    };
    let pages = manifest.load_all(labels.as_ref(), &PruneConfig::default())?;
    log::info!("loaded {} pages from {}", pages.len(), path.display());
    Ok((manifest, pages))
}

fn find_page<'a>(pages: &'a [Webpage], id: &str) -> Result<&'a Webpage> {
    pages
        .iter()
        .find(|p| p.page_id == id)
        .ok_or_else(|| invalid(format!("no page {id:?} in the dataset")))
}

fn ingest(cli: &Cli, a: &crate::IngestArgs) -> Result<()> {
    let (manifest, pages) = load_data(cli, &a.data)?;
    let per_page: Vec<Value> = pages
        .iter()
        .map(|p| json!({"page_id": p.page_id, "domain": p.domain, "elements": p.len(), "fully_labeled": p.fully_labeled}))
        .collect();
    let domains: BTreeMap<String, usize> = manifest.domain_counts().into_iter().collect();
    let hash = manifest.content_hash()?;
    let report = json!({
        "pages": pages.len(),
        "elements": pages.iter().map(Webpage::len).sum::<usize>(),
        "fully_labeled": pages.iter().filter(|p| p.fully_labeled).count(),
        "domains": domains,
        "dataset_sha256": hash,
        "per_page": per_page,
    });
    let out = resolve(&cli.workdir, &a.out);
    write_json(&out, &report)?;
    if let Some(dir) = &a.features {
        let dir = resolve(&cli.workdir, dir);
        std::fs::create_dir_all(&dir)?;
        let vocab = TagVocabulary::from_pages(&pages, DEFAULT_VOCAB_SIZE);
        let fm = FeatureManifest::new(&vocab);
        write_json(&dir.join("columns.json"), &fm)?;
        for p in &pages {
            let mut w = BufWriter::new(File::create(dir.join(format!("{}.csv", p.page_id)))?);
            writeln!(w, "element_id,{}", fm.columns.join(","))?;
            for (e, row) in p.elements.iter().zip(feature_matrix(p, &vocab)) {
                let cells: Vec<String> = row.iter().map(f64::to_string).collect();
                writeln!(w, "{},{}", e.element_id, cells.join(","))?;
            }
            w.flush()?;
        }
    }
    write_stamp(
        &stamp_beside(&out),
        cli.seed,
        json!({"command": "ingest"}),
        Some(hash),
    )
}

fn synth(cli: &Cli, a: &crate::SynthArgs) -> Result<()> {
    let spec_path = a
        .spec
        .as_ref()
        .or(cli.config.as_ref())
        .map(|p| resolve(&cli.workdir, p));
    let mut spec = match &spec_path {
        Some(p) => SynthSpec::from_toml(&read_text(p)?)
            .with_context(|| format!("synth spec {}", p.display()))?,
        None => SynthSpec::default(),
    };
    if let Some(s) = cli.seed {
        spec.seed = s;
    }
    let out = resolve(&cli.workdir, &a.out);
    let ds = write_dataset(&spec, &out)?;
    let hash = DatasetManifest::open(&ds.manifest)?.content_hash()?;
    log::info!("wrote {} pages to {}", spec.n_pages, out.display());
    write_stamp(&out.join("stamp.json"), Some(spec.seed), &spec, Some(hash))
}

fn parse_metric(s: &str) -> Result<GraphMetric> {
    s.parse().map_err(invalid)
}

fn build_graph(cli: &Cli, a: &crate::GraphArgs) -> Result<()> {
    let metric = parse_metric(&a.metric)?;
    let (manifest, pages) = load_data(cli, &a.data)?;
    let page = find_page(&pages, &a.page)?;
    let g = build_graph_with(&page.page_id, &page.elements, a.k, metric);
    let out = resolve(&cli.workdir, &a.out);
    std::fs::write(&out, g.to_json()).with_context(|| format!("writing {}", out.display()))?;
    write_stamp(
        &stamp_beside(&out),
        cli.seed,
        json!({"command": "build-graph", "page": a.page, "k": a.k, "metric": metric}),
        Some(manifest.content_hash()?),
    )
}

fn pages_in(pages: &[Webpage], domains: &std::collections::BTreeSet<String>) -> Vec<Webpage> {
    pages
        .iter()
        .filter(|p| domains.contains(&p.domain))
        .cloned()
        .collect()
}

fn read_folds(path: &Path) -> Result<Vec<FoldSplit>> {
    serde_json::from_str(&read_text(path)?)
        .map_err(|e| invalid(format!("fold file {}: {e}", path.display())))
}

fn train(cli: &Cli, a: &crate::TrainArgs) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let p = resolve(&cli.workdir, p);
            TrainConfig::from_toml(&read_text(&p)?)
                .with_context(|| format!("train config {}", p.display()))?
        }
        None => TrainConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(k) = a.k {
        cfg.k = k;
    }
    if let Some(e) = a.max_epochs {
        cfg.max_epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    if a.freeze_backbone {
        cfg.freeze_backbone = true;
    }
    cfg.validate()?;

    let (manifest, pages) = load_data(cli, &a.data)?;
    let folds = match &a.folds {
        Some(p) => read_folds(&resolve(&cli.workdir, p))?,
        None => make_folds(&manifest.domain_counts(), a.n_folds, cfg.seed)?,
    };
    let selected: Vec<usize> = match a.fold {
        Some(f) if f >= folds.len() => {
            return Err(invalid(format!(
                "fold {f} out of range (0..{})",
                folds.len()
            )))
        }
        Some(f) => vec![f],
        None => (0..folds.len()).collect(),
    };
    let out = resolve(&cli.workdir, &a.out);
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join("folds.json"), &folds)?;

    // One frozen backbone serves every fold: its init depends on the seed only.
    let cache = if cfg.freeze_backbone {
        let model = init_model(&pages, &cfg)?;
        let refs: Vec<&Webpage> = pages.iter().collect();
        Some(RoiCache::build(&model, &refs)?)
    } else {
        None
    };

    let mut log_file = BufWriter::new(File::create(out.join("train_log.jsonl"))?);
    for &f in &selected {
        let fold = &folds[f];
        let (tr, va) = (
            pages_in(&pages, &fold.train_domains),
            pages_in(&pages, &fold.val_domains),
        );
        log::info!("fold {f}: {} train pages, {} val pages", tr.len(), va.len());
        let mut lines = Vec::new();
        let outcome = train_with_log(&tr, &va, &cfg, cache.as_ref(), |r| {
            let mut v = serde_json::to_value(r).expect("epoch report serializes");
            v["fold"] = json!(f);
            lines.push(v);
        });
        for v in &lines {
            serde_json::to_writer(&mut log_file, v)?;
            log_file.write_all(b"\n")?;
        }
        log_file.flush()?;
        let outcome = outcome.with_context(|| format!("training fold {f}"))?;
        outcome
            .model
            .save(&out.join(format!("fold_{f}.safetensors")))?;
    }
    write_stamp(
        &out.join("stamp.json"),
        Some(cfg.seed),
        &cfg,
        Some(manifest.content_hash()?),
    )
}

/// Context size and metric: flags, else the training stamp beside the checkpoint, else defaults.
fn graph_settings(ckpt_dir: &Path, o: &GraphOverride) -> Result<(usize, GraphMetric)> {
    let stamp_cfg: Option<TrainConfig> = std::fs::read_to_string(ckpt_dir.join("stamp.json"))
        .ok()
        .and_then(|s| serde_json::from_str::<Value>(&s).ok())
        .and_then(|v| serde_json::from_value(v["config"].clone()).ok());
    let base = stamp_cfg.unwrap_or_default();
    let metric = match &o.metric {
        Some(m) => parse_metric(m)?,
        None => base.graph_metric,
    };
    Ok((o.k.unwrap_or(base.k), metric))
}

fn parent_dir(p: &Path) -> PathBuf {
    p.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn load_model(path: &Path) -> Result<Model> {
    let path = &existing(path.to_path_buf())?;
    Model::load(path).with_context(|| format!("checkpoint {}", path.display()))
}

#[derive(Serialize)]
struct FoldScore {
    fold_id: usize,
    n_pages: usize,
    #[serde(flatten)]
    acc: ClassAccuracy,
    mean: f64,
}

fn eval(cli: &Cli, a: &crate::EvalArgs) -> Result<()> {
    let ckpt = existing(resolve(&cli.workdir, &a.ckpt))?;
    let dir = if ckpt.is_dir() {
        ckpt.clone()
    } else {
        parent_dir(&ckpt)
    };
    let folds_path = a
        .folds
        .as_ref()
        .map(|p| resolve(&cli.workdir, p))
        .unwrap_or_else(|| dir.join("folds.json"));
    let folds = read_folds(&folds_path)?;
    let runs: Vec<(usize, PathBuf)> = if ckpt.is_dir() {
        (0..folds.len())
            .map(|f| (f, ckpt.join(format!("fold_{f}.safetensors"))))
            .filter(|(_, p)| p.exists())
            .collect()
    } else {
        let from_name = ckpt
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.strip_prefix("fold_"))
            .and_then(|s| s.parse().ok());
        let f = a
            .fold
            .or(from_name)
            .ok_or_else(|| invalid("pass --fold for a checkpoint not named fold_<f>"))?;
        vec![(f, ckpt.clone())]
    };
    if runs.is_empty() {
        return Err(invalid(format!(
            "no fold checkpoints in {}",
            ckpt.display()
        )));
    }
    let (k, metric) = graph_settings(&dir, &a.graph)?;
    let (manifest, pages) = load_data(cli, &a.data)?;
    let mut scores = Vec::new();
    for (f, path) in runs {
        let fold = folds
            .get(f)
            .ok_or_else(|| invalid(format!("fold {f} not in {}", folds_path.display())))?;
        let test = pages_in(&pages, &fold.test_domains);
        if test.is_empty() {
            return Err(invalid(format!(
                "fold {f} has no test pages in this dataset"
            )));
        }
        let model = load_model(&path)?;
        let preds = predict_pages(&model, &test, k, metric, None)?;
        let acc = cross_domain_accuracy(&preds, &truth_of(&test))?;
        log::info!(
            "fold {f}: price {:.3} title {:.3} image {:.3}",
            acc.price,
            acc.title,
            acc.image
        );
        scores.push(FoldScore {
            fold_id: f,
            n_pages: test.len(),
            acc,
            mean: acc.mean(),
        });
    }
    let stat = |g: &dyn Fn(&FoldScore) -> f64| mean_std(&scores.iter().map(g).collect::<Vec<_>>());
    let cols: [(&str, &dyn Fn(&FoldScore) -> f64); 4] = [
        ("price", &|s| s.acc.price),
        ("title", &|s| s.acc.title),
        ("image", &|s| s.acc.image),
        ("mean", &|s| s.mean),
    ];
    let mut mean = serde_json::Map::new();
    let mut std = serde_json::Map::new();
    for (name, g) in cols {
        let (m, s) = stat(g);
        mean.insert(name.into(), json!(m));
        std.insert(name.into(), json!(s));
    }
    let report = json!({"k": k, "metric": metric, "folds": scores, "mean": mean, "std": std});
    let out = resolve(&cli.workdir, &a.out);
    write_json(&out, &report)?;
    write_stamp(
        &stamp_beside(&out),
        cli.seed,
        json!({"command": "eval", "k": k, "metric": metric}),
        Some(manifest.content_hash()?),
    )
}

fn predict(cli: &Cli, a: &crate::PredictArgs) -> Result<()> {
    let ckpt = resolve(&cli.workdir, &a.ckpt);
    let (k, metric) = graph_settings(&parent_dir(&ckpt), &a.graph)?;
    let model = load_model(&ckpt)?;
    let (manifest, pages) = load_data(cli, &a.data)?;
    let selected = match &a.page {
        Some(id) => vec![find_page(&pages, id)?.clone()],
        None => pages,
    };
    let preds = predict_pages(&model, &selected, k, metric, None)?;
    let out = resolve(&cli.workdir, &a.out);
    write_json(&out, &preds)?;
    write_stamp(
        &stamp_beside(&out),
        cli.seed,
        json!({"command": "predict", "k": k, "metric": metric}),
        Some(manifest.content_hash()?),
    )
}

fn viz(cli: &Cli, a: &crate::VizArgs) -> Result<()> {
    let ckpt = resolve(&cli.workdir, &a.ckpt);
    let (k, metric) = graph_settings(&parent_dir(&ckpt), &a.graph)?;
    let model = load_model(&ckpt)?;
    let (manifest, pages) = load_data(cli, &a.data)?;
    let page = find_page(&pages, &a.page)?;
    let shot_path = page
        .screenshot_ref
        .clone()
        .ok_or_else(|| invalid("page has no screenshot"))?;
    let shot = image::open(&shot_path)
        .with_context(|| format!("screenshot {}", shot_path.display()))?
        .to_rgb8();
    let graph = build_graph_with(&page.page_id, &page.elements, k, metric);
    let inputs = model.page_inputs(page, &shot)?;
    let output = model.forward_inputs(page, &graph, &inputs)?;
    let attn = output
        .element_ids
        .iter()
        .position(|&id| id == a.element)
        .map(|row| output.contexts[row].attn.clone())
        .unwrap_or_default();
    let (img, report) = render_attention(page, &shot, a.element, &attn, a.threshold)?;
    let out = resolve(&cli.workdir, &a.out);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    img.save_with_format(&out, image::ImageFormat::Png)
        .with_context(|| format!("writing {}", out.display()))?;
    write_json(&out.with_extension("json"), &report)?;
    write_stamp(
        &stamp_beside(&out),
        cli.seed,
        json!({"command": "viz", "k": k, "metric": metric, "threshold": a.threshold}),
        Some(manifest.content_hash()?),
    )
}
