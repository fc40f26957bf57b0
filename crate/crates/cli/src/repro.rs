use crate::args::{
    AdaptArgs, Common, DiagnoseArgs, EvalArgs, GenDataArgs, PretrainArgs, ReproArgs, TransplantArgs,
};
use crate::commands::{
    adapt_cmd, diagnose_cmd, eval_cmd, gen_data, pretrain, transplant_cmd, ADAPTED_FILE,
    ADAPT_SUMMARY_FILE, PRETRAINED_FILE, REPORT_FILE, TRANSPLANTED_FILE,
};
use crate::error::{CliError, Result};
use crate::manifest::{sha256_json, ManifestBuilder, RunManifest};
use crate::profile::stage_seed;
use neat_core::adaptation::{AdaptMode, LossFlags};
use neat_core::evaluation::EvaluationReport;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const COMPARISON_JSON: &str = "comparison.json";
pub const COMPARISON_CSV: &str = "comparison.csv";

/// One evaluated model in the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub variant: String,
    pub mode: String,
    pub losses: String,
    pub retrieval_neg_rsum: f64,
    pub retrieval_neg_r1: f64,
    pub affirmative_rsum: f64,
    pub mcq_total: f64,
    pub mcq_affirmed: f64,
    pub mcq_negated: f64,
    pub mcq_hybrid: f64,
    pub cls_neg_accuracy: f64,
    pub cls_rev_neg_error: f64,
    pub binary_aff_accuracy: f64,
    pub binary_neg_accuracy: f64,
    pub mmd_norm_vs_nc: f64,
    pub mmd_nc_vs_rnc: f64,
    pub nc_overlap: f64,
    /// Mean similarity of reversed (false) captions to their scenes.
    pub rnc_pos_mean: f64,
    pub rnc_overlap: f64,
    pub checkpoint_hash: String,
}

/// The quantities the acceptance criteria are stated in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriteriaQuantities {
    pub mmd_norm_vs_nc: f64,
    pub mmd_nc_vs_rnc: f64,
    pub rsum_frozen: f64,
    pub rsum_full: f64,
    pub rsum_online: f64,
    pub rev_error_frozen: f64,
    pub rev_error_full: f64,
    pub affirmative_rsum_frozen: f64,
    pub affirmative_rsum_full: f64,
    pub r1_frozen: f64,
    pub r1_ent_only: f64,
    pub mcq_frozen: f64,
    pub mcq_ent_only: f64,
    pub mcq_full: f64,
    /// Variant with the highest MCQ total among the ablation grid.
    pub mcq_best_variant: String,
    pub nc_overlap_frozen: f64,
    pub nc_overlap_full: f64,
    pub rnc_overlap_frozen: f64,
    pub rnc_overlap_full: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub profile: crate::profile::Profile,
    pub seed: u64,
    pub rows: Vec<ComparisonRow>,
    pub criteria: CriteriaQuantities,
}

impl Comparison {
    pub fn row(&self, variant: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn load(out: &Path) -> Result<Comparison> {
        let path = out.join(COMPARISON_JSON);
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub const FROZEN: &str = "frozen";
pub const FULL_OFFLINE: &str = "offline-ent+sr+tri";
pub const FULL_ONLINE: &str = "online-ent+sr+tri";
pub const ENT_OFFLINE: &str = "offline-ent";

fn variant_name(mode: AdaptMode, flags: LossFlags) -> String {
    let mode = match mode {
        AdaptMode::Online => "online",
        AdaptMode::Offline => "offline",
    };
    format!("{mode}-{}", flags.label())
}

fn disable_list(flags: LossFlags) -> String {
    [("ent", flags.ent), ("sr", flags.sr), ("tri", flags.tri)]
        .iter()
        .filter(|(_, on)| !on)
        .map(|(n, _)| *n)
        .collect::<Vec<_>>()
        .join(",")
}

fn read_report(dir: &Path) -> Result<EvaluationReport> {
    let path = dir.join(REPORT_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn missing(what: &str, variant: &str) -> CliError {
    CliError::usage(format!("report {variant} lacks {what}"))
}

fn row_from(
    report: &EvaluationReport,
    variant: &str,
    mode: &str,
    losses: &str,
) -> Result<ComparisonRow> {
    let rn = report
        .retrieval_neg
        .as_ref()
        .ok_or_else(|| missing("retrieval_neg", variant))?;
    let ra = report
        .retrieval_affirmative
        .as_ref()
        .ok_or_else(|| missing("affirmative retrieval", variant))?;
    let mcq = report.mcq.as_ref().ok_or_else(|| missing("mcq", variant))?;
    let cls = report
        .cls_neg
        .as_ref()
        .ok_or_else(|| missing("cls_neg", variant))?;
    let rev = report
        .cls_rev_neg
        .as_ref()
        .ok_or_else(|| missing("cls_rev_neg", variant))?;
    let bin = report
        .binary
        .as_ref()
        .ok_or_else(|| missing("binary", variant))?;
    let diag = report
        .diagnostics
        .as_ref()
        .ok_or_else(|| missing("diagnostics", variant))?;
    let hist = |kind: &str| {
        diag.histograms
            .iter()
            .find(|h| h.kind == kind)
            .ok_or_else(|| missing("histograms", variant))
    };
    let (nc, rnc) = (hist("nc")?, hist("rnc")?);
    Ok(ComparisonRow {
        variant: variant.to_string(),
        mode: mode.to_string(),
        losses: losses.to_string(),
        retrieval_neg_rsum: rn.rsum,
        retrieval_neg_r1: rn.mean_r1(),
        affirmative_rsum: ra.rsum,
        mcq_total: mcq.total,
        mcq_affirmed: mcq.affirmed,
        mcq_negated: mcq.negated,
        mcq_hybrid: mcq.hybrid,
        cls_neg_accuracy: cls.top1_accuracy,
        cls_rev_neg_error: rev.top1_error_rate,
        binary_aff_accuracy: bin.aff_accuracy,
        binary_neg_accuracy: bin.neg_accuracy,
        mmd_norm_vs_nc: diag.mmd_norm_vs_nc,
        mmd_nc_vs_rnc: diag.mmd_nc_vs_rnc,
        nc_overlap: nc.overlap,
        rnc_pos_mean: rnc.pos_mean,
        rnc_overlap: rnc.overlap,
        checkpoint_hash: report.meta.checkpoint_hash.clone(),
    })
}

fn criteria(rows: &[ComparisonRow]) -> Result<CriteriaQuantities> {
    let get = |v: &str| {
        rows.iter()
            .find(|r| r.variant == v)
            .ok_or_else(|| CliError::usage(format!("missing variant {v}")))
    };
    let (frozen, full, ent, online) = (
        get(FROZEN)?,
        get(FULL_OFFLINE)?,
        get(ENT_OFFLINE)?,
        get(FULL_ONLINE)?,
    );
    // The ablation grid: frozen plus every offline flag combination. Ties go
    // to the earlier row.
    let best = rows
        .iter()
        .filter(|r| r.variant == FROZEN || r.mode == "offline")
        .fold(None::<&ComparisonRow>, |best, r| match best {
            Some(b) if b.mcq_total >= r.mcq_total => Some(b),
            _ => Some(r),
        })
        .expect("frozen row exists");
    Ok(CriteriaQuantities {
        mmd_norm_vs_nc: frozen.mmd_norm_vs_nc,
        mmd_nc_vs_rnc: frozen.mmd_nc_vs_rnc,
        rsum_frozen: frozen.retrieval_neg_rsum,
        rsum_full: full.retrieval_neg_rsum,
        rsum_online: online.retrieval_neg_rsum,
        rev_error_frozen: frozen.cls_rev_neg_error,
        rev_error_full: full.cls_rev_neg_error,
        affirmative_rsum_frozen: frozen.affirmative_rsum,
        affirmative_rsum_full: full.affirmative_rsum,
        r1_frozen: frozen.retrieval_neg_r1,
        r1_ent_only: ent.retrieval_neg_r1,
        mcq_frozen: frozen.mcq_total,
        mcq_ent_only: ent.mcq_total,
        mcq_full: full.mcq_total,
        mcq_best_variant: best.variant.clone(),
        nc_overlap_frozen: frozen.nc_overlap,
        nc_overlap_full: full.nc_overlap,
        rnc_overlap_frozen: frozen.rnc_overlap,
        rnc_overlap_full: full.rnc_overlap,
    })
}

/// Everything a repro run produced, by path.
#[derive(Debug, Clone)]
pub struct ReproLayout {
    pub root: PathBuf,
}

impl ReproLayout {
    pub fn pretrained(&self) -> PathBuf {
        self.root.join(PRETRAINED_FILE)
    }

    pub fn adapt_dir(&self, variant: &str) -> PathBuf {
        self.root.join("adapt").join(variant)
    }

    pub fn adapted(&self, variant: &str) -> PathBuf {
        self.adapt_dir(variant).join(ADAPTED_FILE)
    }

    pub fn eval_dir(&self, variant: &str) -> PathBuf {
        self.root.join("eval").join(variant)
    }

    pub fn sibling(&self) -> PathBuf {
        self.root.join("sibling").join(PRETRAINED_FILE)
    }

    pub fn transplanted(&self) -> PathBuf {
        self.root.join("transplant").join(TRANSPLANTED_FILE)
    }
}

/// gen-data, pretrain, diagnose (frozen), adapt over the ablation grid and
/// online, eval every model, diagnose (adapted), optional LN transplant into
/// a sibling, then the comparison table. The first failing stage aborts.
pub fn repro(args: &ReproArgs) -> Result<RunManifest> {
    let c = &args.common;
    let layout = ReproLayout {
        root: c.out.clone(),
    };
    let data = c.data_dir();
    let at = |dir: PathBuf| Common {
        out: dir,
        ..c.clone()
    };
    let mut m = ManifestBuilder::new("repro", &c.out, args)?;
    let mut stages: Vec<RunManifest> = Vec::new();

    stages.push(gen_data(&GenDataArgs::new(c.clone()))?);
    stages.push(pretrain(&PretrainArgs::new(c.clone()))?);
    let frozen_ck = layout.pretrained();
    stages.push(diagnose_cmd(&DiagnoseArgs {
        common: at(c.out.join("diagnose").join(FROZEN)),
        checkpoint: frozen_ck.clone(),
        bundle: Some(data.join("cls_neg")),
    })?);

    // (variant, mode, losses, checkpoint, adapt summary)
    let mut models: Vec<(String, String, String, PathBuf, Option<PathBuf>)> = vec![(
        FROZEN.into(),
        "frozen".into(),
        LossFlags::NONE.label(),
        frozen_ck.clone(),
        None,
    )];
    let mut runs: Vec<(AdaptMode, LossFlags)> = LossFlags::ABLATION_GRID
        .iter()
        .filter(|f| f.any())
        .map(|&f| (AdaptMode::Offline, f))
        .collect();
    runs.push((AdaptMode::Online, LossFlags::ALL));
    for (mode, flags) in runs {
        let variant = variant_name(mode, flags);
        let mut a = AdaptArgs::new(at(layout.adapt_dir(&variant)));
        a.checkpoint = Some(frozen_ck.clone());
        a.bundle = Some(data.join("retrieval_neg"));
        a.mode = Some(mode);
        let disabled = disable_list(flags);
        a.disable = (!disabled.is_empty()).then_some(disabled);
        stages.push(adapt_cmd(&a)?);
        let mode_name = if mode == AdaptMode::Online {
            "online"
        } else {
            "offline"
        };
        models.push((
            variant.clone(),
            mode_name.into(),
            flags.label(),
            layout.adapted(&variant),
            Some(layout.adapt_dir(&variant).join(ADAPT_SUMMARY_FILE)),
        ));
    }
    stages.push(diagnose_cmd(&DiagnoseArgs {
        common: at(c.out.join("diagnose").join("adapted")),
        checkpoint: layout.adapted(FULL_OFFLINE),
        bundle: Some(data.join("cls_neg")),
    })?);

    if args.transplant {
        let sib = Common {
            out: c.out.join("sibling"),
            seed: stage_seed(c.seed, "sibling"),
            profile: c.profile,
        };
        let mut p = PretrainArgs::new(sib);
        p.bundle = Some(data.join("pretrain_affirmative"));
        stages.push(pretrain(&p)?);
        stages.push(transplant_cmd(&TransplantArgs {
            common: at(c.out.join("transplant")),
            ln_from: layout
                .adapt_dir(FULL_OFFLINE)
                .join(crate::commands::ADAPTED_LN_FILE),
            into: layout.sibling(),
        })?);
        models.push((
            "sibling-frozen".into(),
            "frozen".into(),
            LossFlags::NONE.label(),
            layout.sibling(),
            None,
        ));
        models.push((
            "sibling-transplant".into(),
            "transplant".into(),
            LossFlags::ALL.label(),
            layout.transplanted(),
            Some(layout.adapt_dir(FULL_OFFLINE).join(ADAPT_SUMMARY_FILE)),
        ));
    }

    let mut rows = Vec::new();
    for (variant, mode, losses, ck, summary) in &models {
        let mut e = EvalArgs::new(at(layout.eval_dir(variant)), ck);
        e.data = Some(data.clone());
        e.label = Some(variant.clone());
        e.adapt_summary = summary.clone();
        stages.push(eval_cmd(&e)?);
        rows.push(row_from(
            &read_report(&layout.eval_dir(variant))?,
            variant,
            mode,
            losses,
        )?);
    }

    let comparison = Comparison {
        profile: crate::profile::Profile::get(c.profile),
        seed: c.seed,
        criteria: criteria(&rows)?,
        rows,
    };
    let json_path = c.out.join(COMPARISON_JSON);
    crate::commands::write_json(&json_path, &comparison)?;
    m.output(&json_path)?;
    let csv_path = c.out.join(COMPARISON_CSV);
    crate::commands::write_csv(&csv_path, &comparison.rows)?;
    m.output(&csv_path)?;
    for s in &stages {
        for (path, hash) in &s.outputs {
            m.output_with_hash(Path::new(&format!("{}/{path}", s.command)), hash.clone());
        }
    }
    print_table(&comparison);
    m.finish()
}

fn print_table(c: &Comparison) {
    println!(
        "{:<22} {:>8} {:>6} {:>8} {:>6} {:>7} {:>8}",
        "variant", "rSum", "R@1", "aff rSum", "MCQ", "REV err", "RNC sim"
    );
    for r in &c.rows {
        println!(
            "{:<22} {:>8.1} {:>6.2} {:>8.1} {:>6.1} {:>7.1} {:>8.3}",
            r.variant,
            r.retrieval_neg_rsum,
            r.retrieval_neg_r1,
            r.affirmative_rsum,
            r.mcq_total,
            r.cls_rev_neg_error,
            r.rnc_pos_mean
        );
    }
    let q = &c.criteria;
    println!(
        "MMD(normal, nc) {:.4}  MMD(nc, rnc) {:.4}",
        q.mmd_norm_vs_nc, q.mmd_nc_vs_rnc
    );
}

/// Report hashes of a finished repro run, timestamps excluded.
pub fn report_fingerprint(out: &Path) -> Result<Vec<(String, String)>> {
    let mut out_list = Vec::new();
    let eval_root = out.join("eval");
    let mut dirs: Vec<_> = std::fs::read_dir(&eval_root)
        .map_err(|e| CliError::io(&eval_root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    dirs.sort();
    for d in dirs {
        let report = read_report(&d)?;
        out_list.push((
            d.file_name().unwrap().to_string_lossy().into_owned(),
            sha256_json(&report.without_timestamps())?,
        ));
    }
    let comparison = Comparison::load(out)?;
    out_list.push((COMPARISON_JSON.into(), sha256_json(&comparison)?));
    Ok(out_list)
}
