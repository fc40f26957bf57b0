use crate::args::{
    or_default, AdaptArgs, DiagnoseArgs, EvalArgs, GenDataArgs, HardestArg, Preset, PretrainArgs,
    TransplantArgs,
};
use crate::error::{CliError, Context, Result};
use crate::manifest::{sha256_json, ManifestBuilder, RunManifest};
use crate::profile::{stage_seed, Profile};
use neat_core::adaptation::{
    adapt, prepare_items, AdaptOutcome, AdaptationConfig, HardestRule, LossFlags,
};
use neat_core::evaluation::{
    binary_neg_eval, mcq_eval, retrieval_eval, shift_diagnostics, template_cls_eval,
    EvaluationReport, ReportMeta, ShiftDiagnostics,
};
use neat_core::language::{
    Decomposer, DecomposerKind, DecompositionResult, LlmClientConfig, LlmDecomposer, RuleDecomposer,
};
use neat_core::model::{pretrain_dual_encoder, Architecture, Checkpoint, PretrainConfig};
use neat_core::world::{
    build_split_with, generate_world, read_bundle, write_bundle, DatasetBundle, SplitConfig,
    SplitKind, World,
};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

/// Stem of the held-out affirmative bundle used for affirmative retrieval.
pub const HELDOUT_STEM: &str = "affirmative_heldout";
pub const PRETRAINED_FILE: &str = "pretrained.ckpt";
pub const ADAPTED_FILE: &str = "adapted.ckpt";
pub const ADAPTED_LN_FILE: &str = "adapted.ln";
pub const TRANSPLANTED_FILE: &str = "transplanted.ckpt";
pub const REPORT_FILE: &str = "report.json";
pub const ADAPT_SUMMARY_FILE: &str = "adapt.json";

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    neat_core::model::write_atomic(path, bytes).context(|| format!("writing {}", path.display()))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file(path, serde_json::to_string_pretty(value)?.as_bytes())
}

fn load_bundle(stem: &Path) -> Result<DatasetBundle> {
    let bundle = read_bundle(stem).context(|| format!("reading bundle {}", stem.display()))?;
    bundle
        .validate()
        .context(|| format!("validating bundle {}", stem.display()))?;
    Ok(bundle)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).context(|| format!("reading checkpoint {}", path.display()))
}

fn bundle_inputs(m: &mut ManifestBuilder, stem: &Path) -> Result<()> {
    m.input(&stem.with_extension("jsonl"))?;
    m.input(&stem.with_extension("emb"))
}

fn world_of(bundle: &DatasetBundle) -> Result<World> {
    let m = &bundle.manifest;
    generate_world(m.num_concepts, m.dim, m.world_seed)
        .context(|| "regenerating the world of a bundle".into())
}

pub(crate) fn write_csv<T: Serialize>(
    path: &Path,
    rows: impl IntoIterator<Item = T>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| CliError::io(path, e.into_error()))?;
    write_file(path, &bytes)
}

fn split_seed_tag(kind: SplitKind) -> &'static str {
    match kind {
        // Both template tasks share their scenes.
        SplitKind::ClsNeg | SplitKind::ClsRevNeg => "cls",
        other => other.as_str(),
    }
}

fn profile_size(p: &Profile, kind: SplitKind) -> usize {
    match kind {
        SplitKind::PretrainAffirmative => p.pretrain_size,
        SplitKind::RetrievalNeg => p.retrieval_size,
        SplitKind::McqNeg => p.mcq_size,
        SplitKind::BinaryNeg => p.binary_size,
        SplitKind::ClsNeg | SplitKind::ClsRevNeg => p.cls_size,
    }
}

pub fn gen_data(args: &GenDataArgs) -> Result<RunManifest> {
    let c = &args.common;
    let profile = Profile::get(c.profile);
    let concepts = args.concepts.unwrap_or(profile.num_concepts);
    let dim = args.dim.unwrap_or(profile.dim);
    let world = generate_world(concepts, dim, stage_seed(c.seed, "world"))
        .map_err(|e| CliError::usage(e.to_string()))?;
    let data = c.data_dir();
    create_dir(&data)?;
    let mut m = ManifestBuilder::new("gen-data", &c.out, args)?;

    let all = args.split.is_empty();
    let kinds = if all {
        SplitKind::ALL.to_vec()
    } else {
        args.split.clone()
    };
    let mut jobs: Vec<(String, SplitKind, usize, u64, SplitConfig)> = kinds
        .iter()
        .map(|&k| {
            let size = args.size.unwrap_or_else(|| profile_size(&profile, k));
            (
                k.as_str().to_string(),
                k,
                size,
                stage_seed(c.seed, split_seed_tag(k)),
                SplitConfig::default(),
            )
        })
        .collect();
    if all {
        let cfg = SplitConfig {
            distinct_sets: true,
            ..SplitConfig::default()
        };
        let size = args.size.unwrap_or(profile.heldout_size);
        jobs.push((
            HELDOUT_STEM.into(),
            SplitKind::PretrainAffirmative,
            size,
            stage_seed(c.seed, HELDOUT_STEM),
            cfg,
        ));
    }
    for (stem, kind, size, seed, cfg) in jobs {
        let bundle = build_split_with(&world, kind, size, seed, &cfg)
            .map_err(|e| CliError::usage(format!("{stem}: {e}")))?;
        let (jsonl, emb) =
            write_bundle(&bundle, data.join(&stem)).context(|| format!("writing bundle {stem}"))?;
        m.output(&jsonl)?;
        m.output(&emb)?;
        println!("gen-data: {stem} ({size} items)");
    }
    m.finish()
}

#[derive(Serialize)]
struct LossRow {
    step: usize,
    loss: f64,
}

pub fn pretrain(args: &PretrainArgs) -> Result<RunManifest> {
    let c = &args.common;
    let profile = Profile::get(c.profile);
    let stem = or_default(&args.bundle, || {
        c.data_dir().join(SplitKind::PretrainAffirmative.as_str())
    });
    let bundle = load_bundle(&stem)?;
    let world = world_of(&bundle)?;
    let config = PretrainConfig {
        steps: args.steps.unwrap_or(profile.pretrain_steps),
        batch_size: args.batch_size.unwrap_or(profile.pretrain_batch),
        learning_rate: args.lr.unwrap_or(PretrainConfig::default().learning_rate),
        seed: stage_seed(c.seed, "pretrain"),
        ..PretrainConfig::default()
    };
    let arch = Architecture {
        embed_dim: world.dim,
        ..Architecture::default()
    };
    create_dir(&c.out)?;
    let mut m = ManifestBuilder::new(
        "pretrain",
        &c.out,
        &serde_json::json!({ "args": args, "pretrain": config, "architecture": arch }),
    )?;
    bundle_inputs(&mut m, &stem)?;

    println!(
        "pretrain: {} steps on {} captions",
        config.steps,
        bundle.captions.len()
    );
    let (ck, losses) =
        pretrain_dual_encoder(&world, &bundle, arch, &config).context(|| "pretraining".into())?;
    let ck_path = c.out.join(PRETRAINED_FILE);
    ck.save(&ck_path)
        .context(|| format!("writing {}", ck_path.display()))?;
    let curve = c.out.join("pretrain_loss.csv");
    write_csv(
        &curve,
        losses
            .iter()
            .enumerate()
            .map(|(step, &loss)| LossRow { step, loss }),
    )?;
    m.output(&ck_path)?;
    m.output(&curve)?;
    println!(
        "pretrain: final loss {:.4}",
        losses.last().copied().unwrap_or(f64::NAN)
    );
    m.finish()
}

/// Builds the adaptation config: preset, then profile sizes and the stage
/// seed, then the config file, then individual flags.
pub fn resolve_adapt_config(args: &AdaptArgs) -> Result<AdaptationConfig> {
    let profile = Profile::get(args.common.profile);
    let mut base = match args.preset {
        Preset::Image => AdaptationConfig::image(),
        Preset::Video => AdaptationConfig::video(),
    };
    base.batch_size = profile.batch_size;
    base.offline_epochs = profile.offline_epochs;
    base.learning_rate = profile.learning_rate;
    base.seed = stage_seed(args.common.seed, "adapt");

    let mut cfg = if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let overlay: serde_json::Value = serde_json::from_str(&text)?;
        let serde_json::Value::Object(overlay) = overlay else {
            return Err(CliError::usage(format!(
                "{}: config must be a JSON object",
                path.display()
            )));
        };
        let mut merged = serde_json::to_value(&base)?;
        let fields = merged
            .as_object_mut()
            .expect("config serializes to an object");
        for (k, v) in overlay {
            if !fields.contains_key(&k) {
                return Err(CliError::usage(format!(
                    "{}: unknown config field {k:?}",
                    path.display()
                )));
            }
            fields.insert(k, v);
        }
        serde_json::from_value(merged)
            .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?
    } else {
        base
    };

    let set = |slot: &mut f64, v: Option<f64>| {
        if let Some(v) = v {
            *slot = v;
        }
    };
    set(&mut cfg.tau1, args.tau1);
    set(&mut cfg.tau2, args.tau2);
    set(&mut cfg.alpha, args.alpha);
    set(&mut cfg.lambda, args.lambda);
    set(&mut cfg.learning_rate, args.lr);
    set(&mut cfg.weight_decay, args.weight_decay);
    if let Some(b) = args.batch_size {
        cfg.batch_size = b;
    }
    if let Some(e) = args.epochs {
        cfg.offline_epochs = e;
    }
    if let Some(mode) = args.mode {
        cfg.mode = mode;
    }
    if let Some(h) = args.hardest {
        cfg.hardest = match h {
            HardestArg::Min => HardestRule::MinSimilarity,
            HardestArg::Max => HardestRule::MaxSimilarity,
        };
    }
    if let Some(list) = &args.disable {
        cfg.losses = LossFlags::all_except(list).map_err(|e| CliError::usage(e.to_string()))?;
    }
    cfg.validate().map_err(|e| CliError::usage(e.to_string()))?;
    Ok(cfg)
}

fn build_decomposer(args: &AdaptArgs) -> Result<Box<dyn Decomposer>> {
    match args.decomposer {
        DecomposerKind::Rule => Ok(Box::new(RuleDecomposer)),
        DecomposerKind::Llm => {
            let (Some(endpoint), Some(model)) = (&args.llm_endpoint, &args.llm_model) else {
                return Err(CliError::usage(
                    "--decomposer llm needs --llm-endpoint and --llm-model",
                ));
            };
            let mut config = LlmClientConfig {
                endpoint: endpoint.clone(),
                model: model.clone(),
                ..LlmClientConfig::default()
            };
            if let Some(s) = args.llm_timeout_secs {
                config.timeout = Duration::from_secs(s);
            }
            if let Some(r) = args.llm_retries {
                config.retry_budget = r;
            }
            let client = LlmDecomposer::new(config).map_err(|e| CliError::usage(e.to_string()))?;
            Ok(Box::new(client))
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DecompositionCounts {
    pub exact: usize,
    pub heuristic: usize,
    pub no_negation: usize,
    pub from_llm: usize,
    pub fallbacks: usize,
}

/// What `adapt` writes to `adapt.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptSummary {
    pub config: AdaptationConfig,
    pub decomposer: DecomposerKind,
    pub input_checkpoint: String,
    pub output_checkpoint: String,
    pub bundle: String,
    pub steps: usize,
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
    pub decompositions: DecompositionCounts,
}

#[derive(Serialize)]
struct StepRow {
    epoch: usize,
    batch_id: usize,
    l_ent: f64,
    l_sr: f64,
    l_tri: f64,
    total: f64,
}

#[derive(Serialize)]
struct PredictionRow {
    batch_id: usize,
    caption_id: u64,
    scene_id: u64,
    predicted_scene_id: u64,
    correct: bool,
}

#[derive(Serialize)]
struct DecompositionRow<'a> {
    caption_id: u64,
    caption: &'a str,
    #[serde(flatten)]
    result: Option<DecompositionResult>,
    error: Option<String>,
}

fn decompose_bundle(
    bundle: &DatasetBundle,
    decomposer: &dyn Decomposer,
    path: &Path,
) -> Result<DecompositionCounts> {
    let mut counts = DecompositionCounts::default();
    let mut lines = Vec::new();
    for rec in &bundle.captions {
        let (result, error) = match decomposer.decompose(&rec.quad.caption) {
            Ok(d) => {
                match d.confidence {
                    neat_core::language::Confidence::Exact => counts.exact += 1,
                    neat_core::language::Confidence::Heuristic => counts.heuristic += 1,
                }
                counts.from_llm +=
                    usize::from(d.source == neat_core::language::DecompositionSource::Llm);
                counts.fallbacks += usize::from(d.fallback_reason.is_some());
                (Some(d), None)
            }
            Err(neat_core::NeatError::NoNegationFound(_)) => {
                counts.no_negation += 1;
                (None, Some("no negation found".to_string()))
            }
            Err(e) => {
                return Err(CliError::Core {
                    context: format!("decomposing caption {}", rec.caption_id),
                    source: e,
                })
            }
        };
        let row = DecompositionRow {
            caption_id: rec.caption_id,
            caption: &rec.quad.caption,
            result,
            error,
        };
        lines.push(serde_json::to_string(&row)?);
    }
    write_file(path, (lines.join("\n") + "\n").as_bytes())?;
    Ok(counts)
}

fn prediction_rows(bundle: &DatasetBundle, outcome: &AdaptOutcome) -> Vec<PredictionRow> {
    let mut rows = Vec::new();
    for batch in &outcome.predictions {
        for (&item, t) in batch.items.iter().zip(&batch.text_embeddings) {
            let rec = &bundle.captions[item];
            let best = bundle
                .scenes
                .iter()
                .map(|s| (s.scene_id, neat_core::linalg::dot(t, &s.feature)))
                .fold((0, f64::NEG_INFINITY), |acc, (id, s)| {
                    if s > acc.1 {
                        (id, s)
                    } else {
                        acc
                    }
                });
            rows.push(PredictionRow {
                batch_id: batch.batch_id,
                caption_id: rec.caption_id,
                scene_id: rec.scene_id,
                predicted_scene_id: best.0,
                correct: best.0 == rec.scene_id,
            });
        }
    }
    rows
}

pub fn adapt_cmd(args: &AdaptArgs) -> Result<RunManifest> {
    let c = &args.common;
    let config = resolve_adapt_config(args)?;
    let ck_path = or_default(&args.checkpoint, || c.out.join(PRETRAINED_FILE));
    let stem = or_default(&args.bundle, || {
        c.data_dir().join(SplitKind::RetrievalNeg.as_str())
    });
    let checkpoint = load_checkpoint(&ck_path)?;
    let bundle = load_bundle(&stem)?;
    let decomposer = build_decomposer(args)?;
    create_dir(&c.out)?;
    let mut m = ManifestBuilder::new(
        "adapt",
        &c.out,
        &serde_json::json!({ "args": args, "resolved": config }),
    )?;
    m.input(&ck_path)?;
    bundle_inputs(&mut m, &stem)?;

    let decomp_path = c.out.join("decompositions.jsonl");
    let counts = decompose_bundle(&bundle, decomposer.as_ref(), &decomp_path)?;
    let items = prepare_items(&checkpoint.encoder, &bundle, decomposer.as_ref())
        .context(|| "preparing captions".into())?;
    println!(
        "adapt: {:?} mode, losses {}, lr {}, {} captions ({} without negation)",
        config.mode,
        config.losses.label(),
        config.learning_rate,
        items.len(),
        counts.no_negation
    );
    let outcome = adapt(&checkpoint, &items, &config).context(|| "adaptation".into())?;

    let out_ck = c.out.join(ADAPTED_FILE);
    outcome
        .checkpoint
        .save(&out_ck)
        .context(|| format!("writing {}", out_ck.display()))?;
    let out_ln = c.out.join(ADAPTED_LN_FILE);
    neat_core::model::export_ln(&outcome.checkpoint, &out_ln)
        .context(|| format!("writing {}", out_ln.display()))?;
    let losses = c.out.join("adapt_losses.csv");
    write_csv(
        &losses,
        outcome.steps.iter().map(|s| StepRow {
            epoch: s.epoch,
            batch_id: s.batch_id,
            l_ent: s.loss.l_ent,
            l_sr: s.loss.l_sr,
            l_tri: s.loss.l_tri,
            total: s.loss.total,
        }),
    )?;
    for p in [&out_ck, &out_ln, &losses, &decomp_path] {
        m.output(p)?;
    }
    if !outcome.predictions.is_empty() {
        let path = c.out.join("predictions.csv");
        write_csv(&path, prediction_rows(&bundle, &outcome))?;
        m.output(&path)?;
    }
    let summary = AdaptSummary {
        config: config.clone(),
        decomposer: args.decomposer,
        input_checkpoint: checkpoint.hash(),
        output_checkpoint: outcome.checkpoint.hash(),
        bundle: bundle.hash(),
        steps: outcome.steps.len(),
        first_loss: outcome.steps.first().map(|s| s.loss.total),
        last_loss: outcome.steps.last().map(|s| s.loss.total),
        decompositions: counts,
    };
    let summary_path = c.out.join(ADAPT_SUMMARY_FILE);
    write_file(
        &summary_path,
        serde_json::to_string_pretty(&summary)?.as_bytes(),
    )?;
    m.output(&summary_path)?;
    println!(
        "adapt: {} steps, loss {:.4} -> {:.4}",
        summary.steps,
        summary.first_loss.unwrap_or(f64::NAN),
        summary.last_loss.unwrap_or(f64::NAN)
    );
    m.finish()
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Evaluates `checkpoint` on every split present under `data`.
pub fn evaluate(
    checkpoint: &Checkpoint,
    data: &Path,
    label: &str,
    config_hash: String,
) -> Result<(EvaluationReport, Vec<PathBuf>)> {
    let mut inputs = Vec::new();
    let mut load = |stem: &str| -> Result<Option<DatasetBundle>> {
        let path = data.join(stem);
        if !path.with_extension("jsonl").exists() {
            return Ok(None);
        }
        inputs.push(path.clone());
        load_bundle(&path).map(Some)
    };
    let retrieval = load(SplitKind::RetrievalNeg.as_str())?;
    let heldout = load(HELDOUT_STEM)?;
    let mcq = load(SplitKind::McqNeg.as_str())?;
    let binary = load(SplitKind::BinaryNeg.as_str())?;
    let cls = load(SplitKind::ClsNeg.as_str())?;
    let cls_rev = load(SplitKind::ClsRevNeg.as_str())?;
    if inputs.is_empty() {
        return Err(CliError::usage(format!(
            "no evaluation bundles found in {}",
            data.display()
        )));
    }

    let enc = &checkpoint.encoder;
    let mut meta = ReportMeta {
        label: label.to_string(),
        checkpoint_hash: checkpoint.hash(),
        config_hash,
        split_hashes: BTreeMap::new(),
        seeds: BTreeMap::new(),
        created_unix: Some(now_unix()),
    };
    let named = [
        (SplitKind::RetrievalNeg.as_str(), &retrieval),
        (HELDOUT_STEM, &heldout),
        (SplitKind::McqNeg.as_str(), &mcq),
        (SplitKind::BinaryNeg.as_str(), &binary),
        (SplitKind::ClsNeg.as_str(), &cls),
        (SplitKind::ClsRevNeg.as_str(), &cls_rev),
    ];
    for (name, b) in named {
        if let Some(b) = b {
            meta.split_hashes.insert(name.to_string(), b.hash());
            meta.seeds.insert(name.to_string(), b.manifest.split_seed);
            meta.seeds.insert("world".into(), b.manifest.world_seed);
        }
    }
    let ctx = |task: &'static str| move || format!("evaluating {task}");
    let report = EvaluationReport {
        meta,
        retrieval_neg: retrieval
            .as_ref()
            .map(|b| retrieval_eval(enc, b))
            .transpose()
            .context(ctx("retrieval_neg"))?,
        retrieval_affirmative: heldout
            .as_ref()
            .map(|b| retrieval_eval(enc, b))
            .transpose()
            .context(ctx("affirmative retrieval"))?,
        mcq: mcq
            .as_ref()
            .map(|b| mcq_eval(enc, b))
            .transpose()
            .context(ctx("mcq_neg"))?,
        binary: binary
            .as_ref()
            .map(|b| binary_neg_eval(enc, b))
            .transpose()
            .context(ctx("binary_neg"))?,
        cls_neg: cls
            .as_ref()
            .map(|b| template_cls_eval(enc, b))
            .transpose()
            .context(ctx("cls_neg"))?,
        cls_rev_neg: cls_rev
            .as_ref()
            .map(|b| template_cls_eval(enc, b))
            .transpose()
            .context(ctx("cls_rev_neg"))?,
        diagnostics: cls
            .as_ref()
            .map(|b| shift_diagnostics(enc, b))
            .transpose()
            .context(ctx("shift diagnostics"))?,
    };
    Ok((report, inputs))
}

pub fn eval_cmd(args: &EvalArgs) -> Result<RunManifest> {
    let c = &args.common;
    let data = or_default(&args.data, || c.data_dir());
    let checkpoint = load_checkpoint(&args.checkpoint)?;
    let label = args.label.clone().unwrap_or_else(|| {
        args.checkpoint
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".into())
    });
    let config_hash = match &args.adapt_summary {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            let summary: AdaptSummary = serde_json::from_str(&text)?;
            sha256_json(&summary.config)?
        }
        None => sha256_json(&"frozen")?,
    };
    create_dir(&c.out)?;
    let mut m = ManifestBuilder::new("eval", &c.out, args)?;
    m.input(&args.checkpoint)?;
    let (report, inputs) = evaluate(&checkpoint, &data, &label, config_hash)?;
    for stem in &inputs {
        bundle_inputs(&mut m, stem)?;
    }
    let path = c.out.join(REPORT_FILE);
    write_file(
        &path,
        report
            .to_json()
            .context(|| "serializing report".into())?
            .as_bytes(),
    )?;
    m.output_with_hash(&path, sha256_json(&report.without_timestamps())?);
    if let Some(r) = &report.retrieval_neg {
        println!(
            "eval[{label}]: retrieval_neg rSum {:.1}, R@1 {:.1}",
            r.rsum,
            r.mean_r1()
        );
    }
    if let Some(q) = &report.mcq {
        println!("eval[{label}]: mcq_neg total {:.1}", q.total);
    }
    m.finish()
}

/// Writes `diagnostics.json` and one histogram CSV per caption kind.
pub fn write_diagnostics(
    dir: &Path,
    diag: &ShiftDiagnostics,
    m: &mut ManifestBuilder,
) -> Result<()> {
    let path = dir.join("diagnostics.json");
    write_file(&path, serde_json::to_string_pretty(diag)?.as_bytes())?;
    m.output(&path)?;
    for h in &diag.histograms {
        let p = dir.join(format!("hist_{}.csv", h.kind));
        write_file(&p, h.to_csv().as_bytes())?;
        m.output(&p)?;
    }
    Ok(())
}

pub fn diagnose_cmd(args: &DiagnoseArgs) -> Result<RunManifest> {
    let c = &args.common;
    let stem = or_default(&args.bundle, || {
        c.data_dir().join(SplitKind::ClsNeg.as_str())
    });
    let checkpoint = load_checkpoint(&args.checkpoint)?;
    let bundle = load_bundle(&stem)?;
    create_dir(&c.out)?;
    let mut m = ManifestBuilder::new("diagnose", &c.out, args)?;
    m.input(&args.checkpoint)?;
    bundle_inputs(&mut m, &stem)?;
    let diag =
        shift_diagnostics(&checkpoint.encoder, &bundle).context(|| "shift diagnostics".into())?;
    write_diagnostics(&c.out, &diag, &mut m)?;
    println!(
        "diagnose: MMD(normal, nc) {:.4}, MMD(nc, rnc) {:.4}, bandwidth {:.4}",
        diag.mmd_norm_vs_nc, diag.mmd_nc_vs_rnc, diag.bandwidth
    );
    m.finish()
}

pub fn transplant_cmd(args: &TransplantArgs) -> Result<RunManifest> {
    let c = &args.common;
    let target = load_checkpoint(&args.into)?;
    let source = std::fs::read(&args.ln_from).map_err(|e| CliError::io(&args.ln_from, e))?;
    // Accept either a full checkpoint or a layer-norm export.
    let ln_bytes = match Checkpoint::from_bytes(&source) {
        Ok(full) => full
            .ln_to_bytes()
            .context(|| "exporting layer norms".into())?,
        Err(_) => source,
    };
    let out = target
        .with_ln_from_bytes(&ln_bytes)
        .context(|| format!("importing layer norms from {}", args.ln_from.display()))?;
    create_dir(&c.out)?;
    let mut m = ManifestBuilder::new("transplant", &c.out, args)?;
    m.input(&args.ln_from)?;
    m.input(&args.into)?;
    let path = c.out.join(TRANSPLANTED_FILE);
    out.save(&path)
        .context(|| format!("writing {}", path.display()))?;
    m.output(&path)?;
    println!(
        "transplant: {} -> {}",
        args.ln_from.display(),
        path.display()
    );
    m.finish()
}
