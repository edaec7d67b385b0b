//! Argument definitions and subcommand runners.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use pvse_core::artifact::{load_model, save_model};
use pvse_core::dataset::{generate_synthetic, load_dataset, validate_model_dataset_compat, Dataset, SynthSpec};
use pvse_core::embedding::{FrequencyScope, ModelParams, ModelShape};
use pvse_core::eval::{
    evaluate_tags, loss_ablation, pool_available, region_attention_trial, welch_t_test, write_region_csv,
    write_topk_csv, RegionEvalSpec, TagEvalSummary, TrialSpec, WelchResult,
};
use pvse_core::loss::{LossConfig, LossVariant};
use pvse_core::partmap::PartScheme;
use pvse_core::query::{compute_aam, reorder, retrieve, retrieve_part_masked, EmbeddingIndex, PartMask, RankedList, RetrieveOptions};
use pvse_core::train::{train, TrainConfig};

use crate::server::{self, ServeConfig};

/// Failure classes with their process exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad or inconsistent command-line arguments. Exit code 1.
    Usage(String),
    /// Unreadable, invalid or mismatched data. Exit code 2.
    Data(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(e) => write!(f, "error: {e:#}"),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Data(e)
    }
}

impl From<pvse_core::Error> for CliError {
    fn from(e: pvse_core::Error) -> Self {
        CliError::Data(e.into())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Debug, Parser)]
#[command(name = "pvse", version, about = "Per-part visual-semantic embeddings for outfit images and tags")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Global {
    /// Seed for initialization, shuffling, sampling and generation.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Dataset directory.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    /// Model directory.
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,
    /// Output file for tables and traces.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    pub json: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on a dataset and write it to --model.
    Train(TrainArgs),
    /// Tag-to-image retrieval accuracy (P@M, N@M) against an untrained baseline.
    EvalTags(EvalTagsArgs),
    /// Region attention accuracy per part category.
    EvalRegions(EvalRegionsArgs),
    /// Train one model per loss variant and compare retrieval accuracy.
    AblateLoss(AblateArgs),
    /// Retrieve images from a query image plus or minus tags.
    Retrieve(RetrieveArgs),
    /// Order images by similarity to a tag within selected parts.
    Reorder(ReorderArgs),
    /// Per-cell attention map of a tag over an image.
    Aam(AamArgs),
    /// Generate a synthetic dataset into --data.
    Synth(SynthArgs),
    /// Serve the query engine over HTTP.
    Serve(ServeArgs),
    /// Validate a dataset, and a model against it when --model is given.
    Validate,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScopeArg {
    Dataset,
    Minibatch,
}

impl From<ScopeArg> for FrequencyScope {
    fn from(s: ScopeArg) -> Self {
        match s {
            ScopeArg::Dataset => FrequencyScope::Dataset,
            ScopeArg::Minibatch => FrequencyScope::Minibatch,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainOpts {
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 5)]
    pub halve_every: usize,
    #[arg(long, default_value_t = 2.0)]
    pub lambda: f64,
    /// Angular margin in degrees.
    #[arg(long, default_value_t = 36.0)]
    pub alpha_deg: f64,
    #[arg(long, default_value_t = 0.2)]
    pub margin: f64,
    /// Total embedding width K·L.
    #[arg(long, default_value_t = 128)]
    pub kl: usize,
    /// Part scheme preset name or JSON file; must match the dataset.
    #[arg(long, default_value = "pvse4")]
    pub scheme: String,
    /// Where tag frequencies for the tag-set weights come from.
    #[arg(long, value_enum, default_value = "dataset")]
    pub frequency_scope: ScopeArg,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub opts: TrainOpts,
    #[arg(long, default_value = "npair_angular")]
    pub loss: LossVariant,
}

#[derive(Debug, Clone, Args)]
pub struct TrialOpts {
    /// Tags to evaluate; defaults to every category tag with a large enough pool.
    #[arg(long = "tag")]
    pub tags: Vec<String>,
    #[arg(long, value_delimiter = ',', default_values_t = [5, 10, 15])]
    pub m: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    pub ratio: usize,
    #[arg(long, default_value_t = 30)]
    pub repeats: usize,
}

#[derive(Debug, Args)]
pub struct EvalTagsArgs {
    #[command(flatten)]
    pub trial: TrialOpts,
}

#[derive(Debug, Args)]
pub struct EvalRegionsArgs {
    #[arg(long, default_value_t = 5)]
    pub m: usize,
    /// Part offset of the permuted-category control.
    #[arg(long, default_value_t = 1)]
    pub control_shift: usize,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub opts: TrainOpts,
    #[command(flatten)]
    pub trial: TrialOpts,
    #[arg(long, value_delimiter = ',', default_values_t = LossVariant::ALL)]
    pub variants: Vec<LossVariant>,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub query_image: String,
    #[arg(long = "pos-tag")]
    pub pos_tags: Vec<String>,
    #[arg(long = "neg-tag")]
    pub neg_tags: Vec<String>,
    /// Parts to replace with the positive tags.
    #[arg(long, value_delimiter = ',')]
    pub parts: Vec<String>,
    #[arg(long, default_value_t = 5)]
    pub top: usize,
    #[arg(long)]
    pub include_query: bool,
}

#[derive(Debug, Args)]
pub struct ReorderArgs {
    #[arg(long)]
    pub tag: String,
    #[arg(long, value_delimiter = ',')]
    pub parts: Vec<String>,
    /// Only rank images that carry the tag.
    #[arg(long)]
    pub restrict_to_tagged: bool,
    #[arg(long)]
    pub top: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AamArgs {
    #[arg(long)]
    pub image: String,
    #[arg(long)]
    pub tag: String,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 512)]
    pub images: usize,
    #[arg(long, default_value_t = 4)]
    pub parts: usize,
    #[arg(long, default_value_t = 16)]
    pub tags_per_part: usize,
    #[arg(long, default_value_t = 4)]
    pub abstract_tags: usize,
    #[arg(long, default_value_t = 0.1)]
    pub sigma: f64,
    /// Grid rows and columns.
    #[arg(long, default_value_t = 8)]
    pub grid: usize,
    /// Feature dimension D.
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    /// Pixel height and width.
    #[arg(long, default_value_t = 64)]
    pub pixels: usize,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1")]
    pub bind: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Directory of static assets served at `/`.
    #[arg(long = "static")]
    pub static_dir: Option<PathBuf>,
    /// Allowed CORS origin; repeatable.
    #[arg(long = "cors")]
    pub cors: Vec<String>,
}

fn need<'a>(p: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a Path> {
    p.as_deref().ok_or_else(|| usage(format!("--{flag} is required")))
}

fn open_data(g: &Global) -> CliResult<Dataset> {
    let dir = need(&g.data, "data")?;
    Ok(load_dataset(dir)?)
}

/// Loads model and dataset and checks they belong together.
pub fn open_pair(g: &Global) -> CliResult<(ModelParams, Dataset)> {
    let mdir = need(&g.model, "model")?;
    let data = open_data(g)?;
    let model = load_model(mdir)?;
    validate_model_dataset_compat(&model, &data).into_result()?;
    Ok((model, data))
}

fn resolve_scheme(spec: &str) -> CliResult<PartScheme> {
    if let Some(s) = PartScheme::preset(spec) {
        return Ok(s);
    }
    let path = Path::new(spec);
    if path.is_file() {
        return Ok(PartScheme::load(path)?);
    }
    Err(usage(format!("--scheme '{spec}' is neither a preset nor a file")))
}

fn print_json<T: Serialize>(value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).context("serializing output")?;
    println!("{text}");
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Writes `csv` to `out` and `json` next to it with a `.json` extension.
fn write_outputs<T: Serialize>(out: Option<&Path>, csv: &[u8], json: &T) -> CliResult<()> {
    if let Some(path) = out {
        write_file(path, csv)?;
        let text = serde_json::to_vec_pretty(json).context("serializing output")?;
        write_file(&path.with_extension("json"), &text)?;
    }
    Ok(())
}

pub fn run(cli: Cli) -> CliResult<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Train(a) => run_train(g, a),
        Command::EvalTags(a) => run_eval_tags(g, a),
        Command::EvalRegions(a) => run_eval_regions(g, a),
        Command::AblateLoss(a) => run_ablate(g, a),
        Command::Retrieve(a) => run_retrieve(g, a),
        Command::Reorder(a) => run_reorder(g, a),
        Command::Aam(a) => run_aam(g, a),
        Command::Synth(a) => run_synth(g, a),
        Command::Serve(a) => run_serve(g, a),
        Command::Validate => run_validate(g),
    }
}

fn configs(g: &Global, o: &TrainOpts, variant: LossVariant) -> CliResult<(TrainConfig, LossConfig)> {
    let train_cfg = TrainConfig {
        epochs: o.epochs,
        batch_size: o.batch,
        lr0: o.lr,
        halve_every: o.halve_every,
        seed: g.seed,
        frequency_scope: o.frequency_scope.into(),
    };
    let loss_cfg = LossConfig {
        variant,
        lambda: o.lambda,
        alpha_deg: o.alpha_deg,
        triplet_margin: o.margin,
    };
    if train_cfg.epochs == 0 || train_cfg.batch_size < 2 || train_cfg.halve_every == 0 || train_cfg.lr0.is_nan() || train_cfg.lr0 <= 0.0 {
        return Err(usage("--epochs and --halve-every must be positive, --batch at least 2, --lr positive"));
    }
    loss_cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok((train_cfg, loss_cfg))
}

fn init_model(g: &Global, o: &TrainOpts, data: &Dataset) -> CliResult<ModelParams> {
    let scheme = resolve_scheme(&o.scheme)?;
    if &scheme != data.scheme() {
        return Err(CliError::Data(anyhow!(
            "dataset uses part scheme '{}', not '{}'; pass --scheme {}",
            data.scheme().name(),
            scheme.name(),
            data.scheme().name()
        )));
    }
    if o.kl == 0 || !o.kl.is_multiple_of(scheme.num_parts()) {
        return Err(usage(format!("--kl {} is not a positive multiple of {} parts", o.kl, scheme.num_parts())));
    }
    let dims = data.feature_dims();
    let shape = ModelShape {
        embed_dim: o.kl,
        feature_dim: dims.dim,
        grid_rows: dims.rows,
        grid_cols: dims.cols,
    };
    Ok(ModelParams::init(scheme, data.vocab().clone(), shape, o.frequency_scope.into(), g.seed)?)
}

fn run_train(g: &Global, a: &TrainArgs) -> CliResult<()> {
    let mdir = need(&g.model, "model")?.to_path_buf();
    let (train_cfg, loss_cfg) = configs(g, &a.opts, a.loss)?;
    let data = open_data(g)?;
    let init = init_model(g, &a.opts, &data)?;
    let samples = data.training_samples(init.vocab())?;
    let outcome = train(&samples, init, &train_cfg, &loss_cfg)?;
    save_model(&outcome.params, &mdir)?;
    let trace_path = g.out.clone().unwrap_or_else(|| mdir.join("trace.csv"));
    let mut buf = Vec::new();
    outcome.write_trace_csv(&mut buf)?;
    write_file(&trace_path, &buf)?;

    let losses = outcome.epoch_losses();
    if g.json {
        print_json(&json!({
            "model": mdir,
            "trace": trace_path,
            "epochs": losses.len(),
            "samples": samples.len(),
            "loss": loss_cfg.variant.name(),
            "epoch_loss": losses,
        }))
    } else {
        println!(
            "trained {} on {} samples for {} epochs: loss {:.4} -> {:.4}",
            loss_cfg.variant,
            samples.len(),
            losses.len(),
            losses.first().copied().unwrap_or(f64::NAN),
            losses.last().copied().unwrap_or(f64::NAN)
        );
        println!("model written to {}", mdir.display());
        println!("trace written to {}", trace_path.display());
        Ok(())
    }
}

fn trial_template(g: &Global, t: &TrialOpts) -> CliResult<TrialSpec> {
    let spec = TrialSpec {
        tag: String::new(),
        m_values: t.m.clone(),
        negative_ratio: t.ratio,
        repeats: t.repeats,
        seed: g.seed,
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    Ok(spec)
}

/// Explicit tags as given, otherwise category tags (or the whole vocabulary)
/// whose pools are large enough.
fn eval_tag_set(t: &TrialOpts, data: &Dataset, index: &EmbeddingIndex, spec: &TrialSpec) -> CliResult<Vec<String>> {
    if !t.tags.is_empty() {
        return Ok(t.tags.clone());
    }
    let candidates: Vec<String> = if data.region_categories().is_empty() {
        data.vocab().tags().to_vec()
    } else {
        data.region_categories().iter().flat_map(|c| c.tags.clone()).collect()
    };
    let usable: Vec<String> = candidates
        .iter()
        .filter(|t| pool_available(index, t, spec))
        .cloned()
        .collect();
    if usable.len() < candidates.len() {
        eprintln!("skipping {} tags with too few positives or negatives", candidates.len() - usable.len());
    }
    if usable.is_empty() {
        return Err(CliError::Data(anyhow!("no tag has a large enough candidate pool")));
    }
    Ok(usable)
}

#[derive(Serialize)]
struct Significance {
    m: usize,
    welch: WelchResult,
}

fn model_label(model: &ModelParams) -> String {
    format!("pvse-{}", model.num_parts())
}

fn untrained_like(model: &ModelParams, seed: u64) -> CliResult<ModelParams> {
    Ok(ModelParams::init(
        model.scheme().clone(),
        model.vocab().clone(),
        model.shape(),
        model.frequency_scope(),
        seed,
    )?)
}

fn run_eval_tags(g: &Global, a: &EvalTagsArgs) -> CliResult<()> {
    let template = trial_template(g, &a.trial)?;
    let (model, data) = open_pair(g)?;
    let index = EmbeddingIndex::build(&model, &data)?;
    let tags = eval_tag_set(&a.trial, &data, &index, &template)?;
    let baseline_model = untrained_like(&model, g.seed)?;
    let baseline_index = EmbeddingIndex::build(&baseline_model, &data)?;
    let baseline = evaluate_tags(&baseline_index, &baseline_model, &tags, &template, "random")?;
    let summary = evaluate_tags(&index, &model, &tags, &template, &model_label(&model))?;
    let significance = template
        .m_values
        .iter()
        .map(|&m| -> CliResult<Significance> {
            let ours = summary.precision_samples(m).expect("m present");
            let base = baseline.precision_samples(m).expect("m present");
            Ok(Significance {
                m,
                welch: welch_t_test(&ours, &base)?,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    let rows = [baseline, summary];
    let mut csv = Vec::new();
    write_topk_csv(&rows, &mut csv)?;
    let doc = json!({ "tags": tags, "rows": rows, "significance": significance });
    write_outputs(g.out.as_deref(), &csv, &doc)?;
    if g.json {
        return print_json(&doc);
    }
    print!("{}", String::from_utf8_lossy(&csv));
    for s in &significance {
        println!(
            "P@{} vs random: t = {:.3}, df = {:.1}, p = {:.3e}{}",
            s.m,
            s.welch.t,
            s.welch.df,
            s.welch.p,
            if s.welch.degenerate { " (zero variance)" } else { "" }
        );
    }
    Ok(())
}

fn run_eval_regions(g: &Global, a: &EvalRegionsArgs) -> CliResult<()> {
    if a.m == 0 {
        return Err(usage("--m must be positive"));
    }
    let (model, data) = open_pair(g)?;
    if data.region_categories().is_empty() {
        return Err(CliError::Data(anyhow!("dataset manifest defines no region categories")));
    }
    let spec = RegionEvalSpec {
        m: a.m,
        control_shift: a.control_shift,
        ..RegionEvalSpec::new(data.region_categories().to_vec())
    };
    let baseline_model = untrained_like(&model, g.seed)?;
    let baseline = region_attention_trial(&EmbeddingIndex::build(&baseline_model, &data)?, &baseline_model, &spec)?;
    let results = region_attention_trial(&EmbeddingIndex::build(&model, &data)?, &model, &spec)?;
    let rows = vec![("random".to_string(), baseline), (model_label(&model), results)];
    let mut csv = Vec::new();
    write_region_csv(&rows, a.m, &mut csv)?;
    let doc = json!({
        "m": a.m,
        "rows": rows.iter().map(|(label, cats)| json!({ "model": label, "categories": cats })).collect::<Vec<_>>(),
    });
    write_outputs(g.out.as_deref(), &csv, &doc)?;
    if g.json {
        return print_json(&doc);
    }
    print!("{}", String::from_utf8_lossy(&csv));
    for c in &rows[1].1 {
        println!(
            "{}: control P@{} = {:.3} (area {:.3}), skipped {}",
            c.category, a.m, c.control_precision, c.control_area_fraction, c.skipped
        );
    }
    Ok(())
}

fn run_ablate(g: &Global, a: &AblateArgs) -> CliResult<()> {
    let template = trial_template(g, &a.trial)?;
    if a.variants.is_empty() {
        return Err(usage("--variants must name at least one loss"));
    }
    let (train_cfg, base_loss) = configs(g, &a.opts, LossVariant::NpairAngular)?;
    let data = open_data(g)?;
    let init = init_model(g, &a.opts, &data)?;
    let tags = eval_tag_set(&a.trial, &data, &EmbeddingIndex::build(&init, &data)?, &template)?;
    let rows = loss_ablation(&data, &init, &train_cfg, &base_loss, &a.variants, &tags, &template)?;
    let summaries: Vec<TagEvalSummary> = rows.iter().map(|r| r.summary.clone()).collect();
    let mut csv = Vec::new();
    write_topk_csv(&summaries, &mut csv)?;
    let doc = json!({ "tags": tags, "rows": rows });
    write_outputs(g.out.as_deref(), &csv, &doc)?;
    if g.json {
        return print_json(&doc);
    }
    print!("{}", String::from_utf8_lossy(&csv));
    Ok(())
}

fn print_ranked(g: &Global, r: &RankedList) -> CliResult<()> {
    if g.json {
        return print_json(r);
    }
    println!("query: {}", r.query);
    for (i, s) in r.results.iter().enumerate() {
        println!("{:>3}  {:<16} {:.6}", i + 1, s.id, s.score);
    }
    Ok(())
}

fn run_retrieve(g: &Global, a: &RetrieveArgs) -> CliResult<()> {
    if !a.parts.is_empty() && a.pos_tags.is_empty() {
        return Err(usage("--parts requires at least one --pos-tag"));
    }
    if !a.parts.is_empty() && !a.neg_tags.is_empty() {
        return Err(usage("--neg-tag cannot be combined with --parts"));
    }
    if a.top == 0 {
        return Err(usage("--top must be positive"));
    }
    let (model, data) = open_pair(g)?;
    let index = EmbeddingIndex::build(&model, &data)?;
    let opts = RetrieveOptions {
        top_m: a.top,
        exclude_query: !a.include_query,
    };
    let ranked = if a.parts.is_empty() {
        retrieve(&index, &model, &a.query_image, &a.pos_tags, &a.neg_tags, opts)?
    } else {
        let mask = PartMask::from_names(&a.parts, model.scheme(), model.part_dim())?;
        retrieve_part_masked(&index, &model, &a.query_image, &a.pos_tags, &mask, opts)?
    };
    print_ranked(g, &ranked)
}

fn run_reorder(g: &Global, a: &ReorderArgs) -> CliResult<()> {
    let (model, data) = open_pair(g)?;
    let index = EmbeddingIndex::build(&model, &data)?;
    let mask = if a.parts.is_empty() {
        PartMask::all(model.num_parts(), model.part_dim())
    } else {
        PartMask::from_names(&a.parts, model.scheme(), model.part_dim())?
    };
    let ranked = reorder(&index, &model, &a.tag, &mask, a.restrict_to_tagged, a.top)?;
    print_ranked(g, &ranked)
}

fn run_aam(g: &Global, a: &AamArgs) -> CliResult<()> {
    let (model, data) = open_pair(g)?;
    let index = EmbeddingIndex::build(&model, &data)?;
    let grid = compute_aam(&index, &model, &a.image, &a.tag)?;
    if g.json {
        return print_json(&grid);
    }
    println!("{} / {} ({}x{})", grid.image_id, grid.tag, grid.rows, grid.cols);
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for row in &grid.scores {
        let line: Vec<String> = row.iter().map(|s| format!("{s:>7.3}")).collect();
        writeln!(out, "{}", line.join(" ")).context("writing output")?;
    }
    Ok(())
}

fn run_synth(g: &Global, a: &SynthArgs) -> CliResult<()> {
    let dir = need(&g.data, "data")?;
    let spec = SynthSpec {
        images: a.images,
        parts: a.parts,
        tags_per_part: a.tags_per_part,
        abstract_tags: a.abstract_tags,
        sigma: a.sigma,
        seed: g.seed,
        grid_rows: a.grid,
        grid_cols: a.grid,
        feature_dim: a.dim,
        height: a.pixels,
        width: a.pixels,
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let manifest = generate_synthetic(&spec, dir)?;
    if g.json {
        return print_json(&json!({ "data": dir, "images": manifest.images.len(), "spec": spec }));
    }
    println!("wrote {} images to {}", manifest.images.len(), dir.display());
    Ok(())
}

fn run_validate(g: &Global) -> CliResult<()> {
    let data = open_data(g)?;
    let mut doc = json!({
        "data": data.root(),
        "images": data.len(),
        "tags": data.vocab().len(),
        "attachments": data.attachment_count(),
        "scheme": data.scheme().name(),
    });
    let report = match &g.model {
        Some(m) => Some(validate_model_dataset_compat(&load_model(m)?, &data)),
        None => None,
    };
    if let Some(r) = &report {
        doc["model_mismatches"] = serde_json::to_value(&r.mismatches).context("serializing report")?;
    }
    if g.json {
        print_json(&doc)?;
    } else {
        println!(
            "dataset ok: {} images, {} tags, scheme {}",
            data.len(),
            data.vocab().len(),
            data.scheme().name()
        );
        if let Some(r) = &report {
            for m in &r.mismatches {
                println!("mismatch {}: model {}, dataset {}", m.field, m.model, m.dataset);
            }
        }
    }
    match report {
        Some(r) => Ok(r.into_result()?),
        None => Ok(()),
    }
}

fn run_serve(g: &Global, a: &ServeArgs) -> CliResult<()> {
    let (model, data) = open_pair(g)?;
    let state = server::AppState::new(model, data)?;
    let cfg = ServeConfig {
        bind: a.bind.clone(),
        port: a.port,
        static_dir: a.static_dir.clone(),
        cors: a.cors.clone(),
    };
    let rt = tokio::runtime::Runtime::new().context("starting runtime")?;
    rt.block_on(server::serve(state, cfg))?;
    Ok(())
}
