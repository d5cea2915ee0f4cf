use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context, Result};
use serde::Serialize;

use reefcond::ensemble::{ensemble_average, threshold_decide, DecisionConfig, PredictionSet};
use reefcond::eval::{
    confusion_counts, evaluate, fn_fp_table, misclassification_report, render_fn_fp_table, render_misclassification,
    render_report, ClassCounts, CoPrediction, ConfusionCounts, FnFpRow,
};
use reefcond::fsutil::write_bytes_atomic;
use reefcond::ingest::{
    assign_split, build_manifest, ingest_to_dir, read_label_sheet, SplitConfig, SplitGranularity, TilingConfig,
    PATCH_DIR,
};
use reefcond::manifest::{validate_manifest, Manifest, PatchRecord, Split};
use reefcond::query::{run_query, LabelSource, QueryExpression};
use reefcond::synthetic::write_synthetic_dataset;
use reefcond::train::{self, Augmentation, BuildOptions, ModelArtifact, TrainConfig, TINY_NAME, TINY_SIDE};
use reefcond::{LabelSchema, LabelVector};

use crate::*;

pub fn run(cli: &Cli) -> Result<()> {
    let strict = cli.schema_check;
    match &cli.command {
        Command::Ingest(a) => ingest(a, strict),
        Command::Split(a) => split(a, strict),
        Command::Train(a) => train_cmd(a, strict),
        Command::Predict(a) => predict(a, strict),
        Command::Ensemble(a) => ensemble(a),
        Command::Evaluate(a) => evaluate_cmd(a, strict),
        Command::Analyze(a) => analyze(a, strict),
        Command::Query(a) => query(a, strict),
        Command::Synth(a) => synth(a),
        Command::Backbones => backbones(),
    }
}

fn check_manifest(m: &Manifest, strict: bool, what: &Path) -> Result<()> {
    let report = validate_manifest(m);
    for w in &report.warnings {
        eprintln!("warning: {}: {}", what.display(), w.message);
    }
    if !report.is_ok() {
        bail!("{} is invalid:\n{}", what.display(), report);
    }
    if strict && !report.warnings.is_empty() {
        bail!("{}: {} warning(s) with --schema-check", what.display(), report.warnings.len());
    }
    Ok(())
}

fn load_manifest(path: &Path, strict: bool) -> Result<Manifest> {
    let m = Manifest::load(path, &LabelSchema::coral()).with_context(|| format!("reading {}", path.display()))?;
    check_manifest(&m, strict, path)?;
    Ok(m)
}

fn load_predictions(path: &Path) -> Result<PredictionSet> {
    PredictionSet::load(path, &LabelSchema::coral()).with_context(|| format!("reading {}", path.display()))
}

fn patch_dir(explicit: &Option<PathBuf>, manifest: &Path) -> PathBuf {
    explicit.clone().unwrap_or_else(|| {
        manifest
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."))
            .join(PATCH_DIR)
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_bytes_atomic(path, &bytes).with_context(|| format!("writing {}", path.display()))
}

fn ingest(a: &IngestArgs, strict: bool) -> Result<()> {
    let schema = LabelSchema::coral();
    let tiling = TilingConfig::new(a.tile_size, a.stride.unwrap_or(a.tile_size), !a.keep_partial)?;
    let sources = read_label_sheet(&a.labels, &a.images, &schema)?;
    ensure!(!sources.is_empty(), "{} lists no images", a.labels.display());
    // validation happens on the header-only manifest so nothing is written for a bad input
    let preview = build_manifest(&sources, &tiling, &schema)?;
    check_manifest(&preview, strict, &a.labels)?;
    let m = ingest_to_dir(&sources, &tiling, &schema, &a.out)?;
    println!("{} patches from {} images -> {}", m.records.len(), sources.len(), a.out.display());
    Ok(())
}

fn split(a: &SplitArgs, strict: bool) -> Result<()> {
    let m = load_manifest(&a.manifest, strict)?;
    let cfg = SplitConfig {
        train_fraction: a.train_fraction,
        seed: a.seed,
        granularity: match a.granularity {
            Granularity::Image => SplitGranularity::SourceImage,
            Granularity::Patch => SplitGranularity::Patch,
        },
    };
    let s = assign_split(&m, &cfg)?;
    s.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let counts = s.split_counts();
    println!(
        "train {} / test {} -> {}",
        counts.get(&Split::Train).unwrap_or(&0),
        counts.get(&Split::Test).unwrap_or(&0),
        a.out.display()
    );
    Ok(())
}

fn train_cmd(a: &TrainArgs, strict: bool) -> Result<()> {
    let m = load_manifest(&a.manifest, strict)?;
    let registry = reefcond_pretrained::full_registry();
    let mut spec = registry.spec(&a.backbone)?;
    if a.scratch {
        spec.pretrained = false;
    }
    let cfg = TrainConfig {
        learning_rate: a.lr,
        weight_decay: a.weight_decay,
        batch_size: a.batch_size,
        iterations: a.iterations,
        seed: a.seed,
        input_resolution: a.resolution,
        augmentation: if a.hflip { Augmentation::HorizontalFlip } else { Augmentation::None },
    };
    cfg.validate()?;
    let side = a.resolution.unwrap_or(spec.native_resolution);
    let opts = BuildOptions::from_env(m.schema.size(), a.seed, side);
    let every = a.log_every;
    let out = train::train_with_options(&m, &patch_dir(&a.patches, &a.manifest), &registry, &spec, &cfg, &opts, |e| {
        if every > 0 && (e.iteration % every == 0 || e.iteration == 1) {
            eprintln!("iter {:>7}  loss {:.6}", e.iteration, e.loss);
        }
    })?;
    out.artifact.save(&a.out, &out.log)?;
    println!(
        "{}: {} parameters, final loss {:.6} -> {}",
        out.artifact.metadata.backbone.name,
        out.artifact.parameter_count(),
        out.log.last_loss().unwrap_or(f64::NAN),
        a.out.display()
    );
    Ok(())
}

fn predict(a: &PredictArgs, strict: bool) -> Result<()> {
    let decision = DecisionConfig::new(a.threshold)?;
    let schema = LabelSchema::coral();
    let m = load_manifest(&a.manifest, strict)?;
    let artifact = ModelArtifact::load(&a.model, &reefcond_pretrained::full_registry(), &schema)?;
    let records: Vec<&PatchRecord> = m.records.iter().filter(|r| a.split.admits(r.split)).collect();
    ensure!(!records.is_empty(), "no patches in the selected split");
    let probs = train::predict_records(&artifact, &records, &patch_dir(&a.patches, &a.manifest))?;
    let set = PredictionSet::new(decision.threshold, threshold_decide(&probs, &decision)?);
    set.save(&a.out, &schema).with_context(|| format!("writing {}", a.out.display()))?;
    println!("{} predictions -> {}", set.records.len(), a.out.display());
    Ok(())
}

fn ensemble(a: &EnsembleArgs) -> Result<()> {
    let decision = DecisionConfig::new(a.threshold)?;
    let members = a
        .inputs
        .iter()
        .map(|p| load_predictions(p)?.matrix().with_context(|| p.display().to_string()))
        .collect::<Result<Vec<_>>>()?;
    let mean = ensemble_average(&members)?;
    let set = PredictionSet::new(decision.threshold, threshold_decide(&mean, &decision)?);
    set.save(&a.out, &LabelSchema::coral())
        .with_context(|| format!("writing {}", a.out.display()))?;
    println!("{} members, {} patches -> {}", members.len(), mean.rows(), a.out.display());
    Ok(())
}

/// Predicted and true label vectors for the manifest records in `filter`,
/// in manifest order. Every selected record must have a prediction, and
/// every prediction must name a manifest record.
fn align(
    m: &Manifest,
    preds: &PredictionSet,
    filter: SplitFilter,
    threshold: Option<f64>,
) -> Result<(Vec<LabelVector>, Vec<LabelVector>)> {
    let decision = threshold.map(DecisionConfig::new).transpose()?;
    let known = m.index_by_id();
    if let Some(r) = preds.records.iter().find(|r| !known.contains_key(r.patch_id.as_str())) {
        bail!("prediction for `{}`, which is not in the manifest", r.patch_id);
    }
    let by_id: HashMap<&str, _> = preds.records.iter().map(|r| (r.patch_id.as_str(), r)).collect();
    let mut predicted = Vec::new();
    let mut truth = Vec::new();
    for rec in m.records.iter().filter(|r| filter.admits(r.split)) {
        let p = by_id
            .get(rec.patch_id.as_str())
            .ok_or_else(|| anyhow!("no prediction for `{}`", rec.patch_id))?;
        predicted.push(match &decision {
            Some(d) => LabelVector::from_bools(&p.probs.iter().map(|&x| x >= d.threshold).collect::<Vec<_>>()),
            None => p.labels.clone(),
        });
        truth.push(rec.labels.clone());
    }
    ensure!(!truth.is_empty(), "no patches in the selected split");
    Ok((predicted, truth))
}

fn evaluate_cmd(a: &EvaluateArgs, strict: bool) -> Result<()> {
    let schema = LabelSchema::coral();
    let m = load_manifest(&a.manifest, strict)?;
    let preds = load_predictions(&a.predictions)?;
    let (predicted, truth) = align(&m, &preds, a.split, a.threshold)?;
    let mut report = evaluate(&predicted, &truth, &schema)?;
    if let Some(dir) = &a.model {
        let meta: train::ArtifactMetadata = serde_json::from_slice(
            &std::fs::read(dir.join(train::METADATA_FILE)).with_context(|| format!("reading {}", dir.display()))?,
        )?;
        report.model = Some(meta.backbone.name);
        report.parameter_count = Some(meta.parameter_count);
    }
    if let Some(name) = &a.model_name {
        report.model = Some(name.clone());
    }
    if let Some(out) = &a.out {
        write_bytes_atomic(out, report.to_json().as_bytes()).with_context(|| format!("writing {}", out.display()))?;
    }
    print!("{}", render_report(&report));
    Ok(())
}

#[derive(Serialize)]
struct AnalysisOutput {
    fn_fp: Vec<FnFpRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    misclassification: Option<Vec<CoPrediction>>,
}

fn read_counts_csv(path: &Path, schema: &LabelSchema) -> Result<ConfusionCounts> {
    #[derive(serde::Deserialize)]
    struct Row {
        class: String,
        #[serde(rename = "fn")]
        fn_: u64,
        fp: u64,
    }
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut counts = ConfusionCounts::zeros(schema.size());
    let mut seen = BTreeSet::new();
    for (i, row) in reader.deserialize::<Row>().enumerate() {
        let line = i + 2;
        let row = row.with_context(|| format!("{} line {line}", path.display()))?;
        let idx = schema
            .index_of(&row.class)
            .ok_or_else(|| anyhow!("{} line {line}: unknown class `{}`", path.display(), row.class))?;
        ensure!(seen.insert(idx), "{} line {line}: `{}` listed twice", path.display(), row.class);
        counts.classes[idx] = ClassCounts {
            fn_: row.fn_,
            fp: row.fp,
            ..ClassCounts::default()
        };
    }
    ensure!(seen.len() == schema.size(), "{} must list all {} classes", path.display(), schema.size());
    Ok(counts)
}

fn analyze(a: &AnalyzeArgs, strict: bool) -> Result<()> {
    let schema = LabelSchema::coral();
    let (counts, mis) = match (&a.counts, &a.manifest, &a.predictions) {
        (Some(csv), _, _) => (read_counts_csv(csv, &schema)?, None),
        (None, Some(mp), Some(pp)) => {
            let m = load_manifest(mp, strict)?;
            let (predicted, truth) = align(&m, &load_predictions(pp)?, a.split, None)?;
            let counts = confusion_counts(&predicted, &truth)?;
            (counts, Some(misclassification_report(&predicted, &truth, &schema)?))
        }
        _ => bail!("give either --counts or both --manifest and --predictions"),
    };
    let rows = fn_fp_table(&counts, &schema);
    let output = AnalysisOutput {
        fn_fp: rows,
        misclassification: mis,
    };
    if let Some(out) = &a.out {
        write_json(out, &output)?;
    }
    print!("{}", render_fn_fp_table(&output.fn_fp));
    if let Some(mis) = &output.misclassification {
        println!();
        print!("{}", render_misclassification(mis));
    }
    Ok(())
}

fn query(a: &QueryArgs, strict: bool) -> Result<()> {
    let expr = QueryExpression {
        require: a.require.iter().map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
        forbid: a.forbid.iter().map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
        site: a.site.clone(),
        split: a.split,
    };
    expr.validate(&LabelSchema::coral())?;
    let m = load_manifest(&a.manifest, strict)?;
    let preds = match (a.source, &a.predictions) {
        (QuerySource::Truth, None) => None,
        (QuerySource::Truth, Some(_)) => bail!("--predictions given with --source truth"),
        (QuerySource::Predicted, Some(p)) => Some(load_predictions(p)?),
        (QuerySource::Predicted, None) => bail!("--source predicted needs --predictions"),
    };
    let source = preds.as_ref().map_or(LabelSource::GroundTruth, LabelSource::Predicted);
    let result = run_query(&m, source, &expr)?;
    if let Some(out) = &a.out {
        write_json(out, &result)?;
    }
    for id in &result.patch_ids {
        println!("{id}");
    }
    println!();
    for (site, n) in &result.per_site {
        println!("{site}\t{n}");
    }
    println!("total\t{}", result.patch_ids.len());
    Ok(())
}

fn synth(a: &SynthArgs) -> Result<()> {
    ensure!((1..=255).contains(&a.count), "--count must be between 1 and 255");
    let m = write_synthetic_dataset(&a.out, a.count, a.side, a.seed, Split::Unassigned)
        .with_context(|| format!("writing {}", a.out.display()))?;
    println!("{} synthetic patches -> {}", m.records.len(), a.out.display());
    Ok(())
}

fn backbones() -> Result<()> {
    println!("{:<18} {:>6}  status", "name", "input");
    println!("{:<18} {:>6}  built in", TINY_NAME, TINY_SIDE);
    for b in reefcond_pretrained::CATALOG {
        let status = if b.runnable() { "needs weights unless --scratch" } else { "catalogue only" };
        println!("{:<18} {:>6}  {status}", b.name, b.native_resolution);
    }
    Ok(())
}
