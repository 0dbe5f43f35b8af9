//! Subcommand implementations. Every input is loaded and validated before
//! any computation starts.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde_json::json;

use siamfv::em::{em_fit_traced, pool_descriptors, EmConfig};
use siamfv::gradcheck::{finite_diff_check_mode, TOLERANCE};
use siamfv::instances::{random_instance, Conditioning};
use siamfv::io::{read_gmm, read_projection, write_descriptors, write_gmm, write_projection, write_vector};
use siamfv::manifest::{
    load_gallery, load_training_set, to_json_bytes, GalleryEntry, GalleryManifest, LoadedGallery, QueryEntry,
    Source, TrainingEntry, TrainingManifest,
};
use siamfv::projection::{fit_lda_whiten, fit_pca_whiten, ProjectionModel};
use siamfv::retrieval::{baseline_pool, evaluate, GalleryIndex, PoolMode};
use siamfv::synth::{generate, SynthConfig};
use siamfv::train::{train, BackboneModel, SiameseModel, TrainConfig, TrainingItem};
use siamfv::{fv_encode, GmmModel, LocalDescriptorSet, PosteriorMode};

use crate::{
    Command, EncodeArgs, EvalArgs, FitMethod, GradcheckArgs, InitGmmArgs, Pool, ProjectArgs, SynthArgs, TrainArgs,
};

/// A failure detected by the CLI itself rather than the library.
#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

fn fail(kind: &'static str, message: impl Into<String>) -> anyhow::Error {
    CliError { kind, message: message.into() }.into()
}

pub fn error_line(kind: &str, message: &str) -> String {
    json!({ "error": kind, "message": message.replace('\n', " ") }).to_string()
}

pub fn describe_error(e: &anyhow::Error) -> String {
    let kind = e
        .chain()
        .find_map(|c| {
            c.downcast_ref::<siamfv::Error>()
                .map(|l| l.kind())
                .or_else(|| c.downcast_ref::<CliError>().map(|c| c.kind))
        })
        .unwrap_or("error");
    error_line(kind, &format!("{e:#}"))
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::InitGmm(a) => init_gmm(a),
        Command::Train(a) => train_cmd(a),
        Command::Encode(a) => encode(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Project(a) => project(a),
        Command::Eval(a) => eval(a),
        Command::Synth(a) => synth(a),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn read_backbone(path: &Path) -> Result<BackboneModel> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let raw: BackboneModel = serde_json::from_str(&text).map_err(siamfv::Error::from)?;
    Ok(BackboneModel::new(raw.in_dim, raw.out_dim, raw.weights, raw.bias)?)
}

fn check_backbone(backbone: &BackboneModel, input_dim: usize, gmm: &GmmModel) -> Result<()> {
    if backbone.in_dim != input_dim || backbone.out_dim != gmm.dim() {
        return Err(siamfv::Error::DimensionMismatch {
            expected: input_dim * gmm.dim(),
            actual: backbone.in_dim * backbone.out_dim,
        }
        .into());
    }
    Ok(())
}

fn print_json(value: &serde_json::Value) {
    println!("{value}");
}

/// Relevance by class: every item with a same-class peer becomes a query.
fn class_queries(ids: &[String], labels: &[String]) -> Vec<QueryEntry> {
    ids.iter()
        .enumerate()
        .filter_map(|(i, id)| {
            let relevant: Vec<String> = ids
                .iter()
                .zip(labels)
                .enumerate()
                .filter(|(j, (_, l))| *j != i && **l == labels[i])
                .map(|(_, (other, _))| other.clone())
                .collect();
            (!relevant.is_empty()).then(|| QueryEntry {
                id: id.clone(),
                relevant,
                ignore: Vec::new(),
                vector_path: None,
                descriptor_path: None,
            })
        })
        .collect()
}

fn init_gmm(a: InitGmmArgs) -> Result<()> {
    let set = load_training_set(&a.manifest)?;
    let inputs: Vec<&LocalDescriptorSet> = set.items.iter().map(|i| &i.input).collect();
    let pooled = pool_descriptors(&inputs, a.pool_size, a.seed)?;
    let mut cfg = EmConfig::new(a.clusters, a.seed);
    cfg.max_iters = a.max_iters;
    let (gmm, trace) = em_fit_traced(&pooled, &cfg)?;
    write_gmm(&a.out, &gmm)?;
    print_json(&json!({
        "clusters": gmm.num_clusters(),
        "dim": gmm.dim(),
        "descriptors": pooled.count(),
        "iterations": trace.log_likelihoods.len() - 1,
        "log_likelihood": trace.log_likelihoods.last(),
        "converged": trace.converged,
        "reseeds": trace.reseeds,
    }));
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let set = load_training_set(&a.manifest)?;
    let gmm = read_gmm(&a.gmm)?;
    let supplied = a.backbone.as_deref().map(read_backbone).transpose()?;
    let input_dim = set.input_dim();
    let backbone = supplied.clone().unwrap_or_else(|| BackboneModel::identity(input_dim));
    check_backbone(&backbone, input_dim, &gmm)?;
    let (items, eval_items) = match (&supplied, a.freeze_backbone) {
        // a frozen backbone is applied once up front
        (Some(b), true) => {
            let apply = |v: Vec<TrainingItem>| -> Result<Vec<TrainingItem>> {
                v.into_iter()
                    .map(|i| Ok(TrainingItem { input: b.forward(&i.input)?, ..i }))
                    .collect()
            };
            (apply(set.items)?, apply(set.eval)?)
        }
        _ => (set.items, set.eval),
    };
    let cfg = TrainConfig {
        margin: a.margin,
        learning_rate: a.lr,
        momentum: a.momentum,
        weight_decay: a.weight_decay,
        epochs: a.epochs,
        pairs_per_mine: a.tuples,
        negatives_per_pair: a.negatives,
        remine_every: a.remine_every,
        iterations_per_epoch: a.iterations_per_epoch,
        seed: a.seed,
        mode: a.posterior.into(),
        use_backbone: !a.freeze_backbone,
        train_gmm: !a.freeze_gmm,
    };
    let init = SiameseModel { gmm, backbone };
    let outcome = train(&items, &eval_items, init, &cfg)?;

    ensure_dir(&a.out)?;
    write_gmm(&a.out.join("gmm.fvg"), &outcome.model.gmm)?;
    let mut backbone_json = serde_json::to_vec_pretty(&outcome.model.backbone)?;
    backbone_json.push(b'\n');
    write_file(&a.out.join("backbone.json"), &backbone_json)?;
    let mut metrics = String::new();
    for m in &outcome.log {
        metrics.push_str(&serde_json::to_string(m)?);
        metrics.push('\n');
    }
    write_file(&a.out.join("metrics.jsonl"), metrics.as_bytes())?;
    let last = outcome.log.last().expect("at least one epoch");
    print_json(&json!({
        "epochs": outcome.log.len(),
        "mean_loss": last.mean_loss,
        "map_eval": last.map_eval,
        "skipped_iterations": outcome.skipped_iterations,
    }));
    Ok(())
}

/// Maps a descriptor set to a unit global vector.
struct Encoder {
    gmm: Option<GmmModel>,
    backbone: Option<BackboneModel>,
    pool: Pool,
    mode: PosteriorMode,
}

impl Encoder {
    fn encode(&self, set: &LocalDescriptorSet) -> siamfv::Result<Vec<f64>> {
        let described;
        let x = match &self.backbone {
            Some(b) => {
                described = b.forward(set)?;
                &described
            }
            None => set,
        };
        match self.pool {
            Pool::Fv => {
                let gmm = self.gmm.as_ref().expect("fv pooling requires a GMM");
                Ok(fv_encode(x, gmm, self.mode)?.normalized)
            }
            Pool::Sum => baseline_pool(x, PoolMode::Sum),
            Pool::Max => baseline_pool(x, PoolMode::Max),
        }
    }
}

fn encode(a: EncodeArgs) -> Result<()> {
    let set = load_training_set(&a.manifest)?;
    let gmm = read_gmm(&a.gmm)?;
    let backbone = a.backbone.as_deref().map(read_backbone).transpose()?;
    let input_dim = set.input_dim();
    match &backbone {
        Some(b) => check_backbone(b, input_dim, &gmm)?,
        None if a.pool == Pool::Fv && input_dim != gmm.dim() => {
            return Err(siamfv::Error::DimensionMismatch { expected: gmm.dim(), actual: input_dim }.into())
        }
        None => {}
    }
    let encoder = Encoder { gmm: Some(gmm), backbone, pool: a.pool, mode: a.posterior.into() };
    let items: Vec<&TrainingItem> = set.items.iter().chain(&set.eval).collect();
    let vectors = items
        .par_iter()
        .map(|i| encoder.encode(&i.input).with_context(|| format!("encoding {}", i.id)))
        .collect::<Result<Vec<_>>>()?;

    ensure_dir(&a.out.join("vectors"))?;
    let mut entries = Vec::with_capacity(items.len());
    for (n, (item, v)) in items.iter().zip(&vectors).enumerate() {
        let rel = format!("vectors/{n:06}.fvd");
        write_vector(&a.out.join(&rel), v)?;
        entries.push(GalleryEntry {
            id: item.id.clone(),
            vector_path: Some(rel),
            descriptor_path: None,
            dataset_tag: a.dataset_tag.clone(),
            class_label: Some(item.class_label.clone()),
        });
    }
    let ids: Vec<String> = items.iter().map(|i| i.id.clone()).collect();
    let labels: Vec<String> = items.iter().map(|i| i.class_label.clone()).collect();
    let manifest = GalleryManifest { items: entries, queries: class_queries(&ids, &labels) };
    write_file(&a.out.join("vectors.json"), &to_json_bytes(&manifest)?)?;
    print_json(&json!({ "items": items.len(), "dim": vectors[0].len() }));
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    if a.clusters == 0 || a.dim == 0 || a.count == 0 {
        return Err(siamfv::Error::InvalidInput("clusters, dim and count must be positive".into()).into());
    }
    let (set, gmm) = random_instance(a.clusters, a.dim, a.count, a.seed, Conditioning::Soft);
    let report = finite_diff_check_mode(&set, &gmm, a.posterior.into(), a.step, a.seed)?;
    println!(
        "gradcheck clusters={} dim={} count={} seed={} step={:e}",
        a.clusters, a.dim, a.count, a.seed, a.step
    );
    println!("{report}");
    println!("{}", serde_json::to_string(&report)?);
    if !report.passes(TOLERANCE) {
        return Err(fail(
            "gradient_check_failed",
            format!(
                "max relative error {:e} exceeds {:e} at {}",
                report.max_rel_error, TOLERANCE, report.worst_parameter
            ),
        ));
    }
    Ok(())
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".fit.json");
    PathBuf::from(s)
}

fn vector_rows(gallery: &LoadedGallery) -> Result<Vec<Vec<f64>>> {
    if gallery.needs_encoder() {
        return Err(siamfv::Error::Manifest("projection inputs must be vector files".into()).into());
    }
    let (items, _) = gallery.resolve(|_| unreachable!("checked above"))?;
    if items.is_empty() {
        return Err(siamfv::Error::EmptyInput.into());
    }
    Ok(items.into_iter().map(|i| i.vector).collect())
}

fn dataset_tags(gallery: &LoadedGallery) -> BTreeSet<String> {
    gallery.items.iter().map(|e| e.dataset_tag.clone()).collect()
}

fn project(a: ProjectArgs) -> Result<()> {
    match (a.fit, &a.apply) {
        (Some(method), None) => project_fit(method, &a),
        (None, Some(model)) => project_apply(model, &a),
        _ => unreachable!("clap enforces exactly one of --fit and --apply"),
    }
}

fn project_fit(method: FitMethod, a: &ProjectArgs) -> Result<()> {
    let gallery = load_gallery(&a.vectors)?;
    let rows = vector_rows(&gallery)?;
    let model = match method {
        FitMethod::Pca => fit_pca_whiten(&rows, a.dim)?,
        FitMethod::Lda => {
            let labels = gallery
                .items
                .iter()
                .map(|e| {
                    e.class_label
                        .clone()
                        .ok_or_else(|| siamfv::Error::Manifest(format!("item {} has no class_label", e.id)))
                })
                .collect::<siamfv::Result<Vec<_>>>()?;
            fit_lda_whiten(&rows, &labels, a.dim)?
        }
    };
    write_projection(&a.out, &model)?;
    let tags = dataset_tags(&gallery);
    let meta = json!({
        "method": model.method(),
        "input_dim": model.input_dim(),
        "output_dim": model.output_dim(),
        "dataset_tags": tags,
    });
    write_file(&sidecar(&a.out), &to_json_bytes(&meta)?)?;
    print_json(&meta);
    Ok(())
}

fn project_apply(model_path: &Path, a: &ProjectArgs) -> Result<()> {
    let model: ProjectionModel = read_projection(model_path)?;
    let gallery = load_gallery(&a.vectors)?;
    let eval_tags = dataset_tags(&gallery);
    let meta_path = sidecar(model_path);
    if meta_path.exists() {
        let text = fs::read_to_string(&meta_path)?;
        let meta: serde_json::Value = serde_json::from_str(&text).map_err(siamfv::Error::from)?;
        let fit_tags: BTreeSet<String> = meta["dataset_tags"]
            .as_array()
            .map(|v| v.iter().filter_map(|t| t.as_str().map(str::to_string)).collect())
            .unwrap_or_default();
        let shared: Vec<&String> = fit_tags.intersection(&eval_tags).collect();
        if !shared.is_empty() {
            return Err(siamfv::Error::Protocol(format!(
                "projection was fitted on dataset(s) {shared:?} present in the evaluated vectors"
            ))
            .into());
        }
    }
    let rows = vector_rows(&gallery)?;
    let projected = model.project_batch(&rows)?;
    let query_rows: Vec<(usize, Vec<f64>)> = gallery
        .queries
        .iter()
        .enumerate()
        .filter_map(|(n, (_, s))| match s {
            Some(Source::Vector(v)) => Some(model.project(v).map(|p| (n, p))),
            _ => None,
        })
        .collect::<siamfv::Result<_>>()?;

    ensure_dir(&a.out.join("vectors"))?;
    let mut items = Vec::with_capacity(projected.len());
    for (n, (entry, v)) in gallery.items.iter().zip(&projected).enumerate() {
        let rel = format!("vectors/{n:06}.fvd");
        write_vector(&a.out.join(&rel), v)?;
        items.push(GalleryEntry {
            id: entry.id.clone(),
            vector_path: Some(rel),
            descriptor_path: None,
            dataset_tag: entry.dataset_tag.clone(),
            class_label: entry.class_label.clone(),
        });
    }
    let own: BTreeMap<usize, Vec<f64>> = query_rows.into_iter().collect();
    let mut queries = Vec::with_capacity(gallery.queries.len());
    for (n, (q, _)) in gallery.queries.iter().enumerate() {
        let vector_path = match own.get(&n) {
            Some(v) => {
                let rel = format!("vectors/q{n:06}.fvd");
                write_vector(&a.out.join(&rel), v)?;
                Some(rel)
            }
            None => None,
        };
        queries.push(QueryEntry { vector_path, descriptor_path: None, ..q.clone() });
    }
    let manifest = GalleryManifest { items, queries };
    write_file(&a.out.join("vectors.json"), &to_json_bytes(&manifest)?)?;
    print_json(&json!({ "items": projected.len(), "dim": model.output_dim() }));
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let gallery = load_gallery(&a.gallery)?;
    let gmm = a.gmm.as_deref().map(read_gmm).transpose()?;
    let backbone = a.backbone.as_deref().map(read_backbone).transpose()?;
    if gallery.needs_encoder() && a.pool == Pool::Fv && gmm.is_none() {
        return Err(fail("usage", "gallery lists descriptor files; pass --gmm or --pool sum|max"));
    }
    let encoder = Encoder { gmm, backbone, pool: a.pool, mode: a.posterior.into() };
    let (items, query_vectors) = gallery.resolve(|s| encoder.encode(s))?;
    let index = GalleryIndex::new(items, gallery.relevance())?;
    let report = evaluate(&index, &query_vectors)?;
    write_file(&a.out, &to_json_bytes(&report)?)?;
    print_json(&json!({ "map": report.map, "queries": report.queries.len() }));
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut cfg = SynthConfig::new(a.classes, a.items_per_class, a.descriptors_per_item, a.dim, a.seed);
    if let Some(e) = a.eval_classes {
        cfg.eval_classes = e;
    }
    let ds = generate(&cfg)?;
    ensure_dir(&a.out.join("items"))?;
    let write_split = |items: &[TrainingItem]| -> Result<Vec<TrainingEntry>> {
        items
            .iter()
            .map(|i| {
                let rel = format!("items/{}.fvd", i.id);
                write_descriptors(&a.out.join(&rel), &i.input)?;
                Ok(TrainingEntry {
                    id: i.id.clone(),
                    class_label: i.class_label.clone(),
                    descriptor_path: Some(rel),
                    raw_patch_path: None,
                })
            })
            .collect()
    };
    let train_entries = write_split(&ds.train)?;
    let eval_entries = write_split(&ds.eval)?;
    let gallery_source = if eval_entries.is_empty() { &train_entries } else { &eval_entries };
    let gallery = GalleryManifest {
        items: gallery_source
            .iter()
            .map(|e| GalleryEntry {
                id: e.id.clone(),
                vector_path: None,
                descriptor_path: e.descriptor_path.clone(),
                dataset_tag: a.dataset_tag.clone(),
                class_label: Some(e.class_label.clone()),
            })
            .collect(),
        queries: class_queries(
            &gallery_source.iter().map(|e| e.id.clone()).collect::<Vec<_>>(),
            &gallery_source.iter().map(|e| e.class_label.clone()).collect::<Vec<_>>(),
        ),
    };
    let manifest = TrainingManifest { items: train_entries, eval: eval_entries };
    write_file(&a.out.join("manifest.json"), &to_json_bytes(&manifest)?)?;
    write_file(&a.out.join("gallery.json"), &to_json_bytes(&gallery)?)?;
    print_json(&json!({
        "train_items": ds.train.len(),
        "eval_items": ds.eval.len(),
        "dim": a.dim,
    }));
    Ok(())
}
