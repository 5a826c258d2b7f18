//! Command implementations. Each resolves its settings, runs the library
//! contract, writes its artifacts and finishes with `run.json`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use bcrec::bias_extractor::bias_report_csv;
use bcrec::checkpoint::{load_extractor, save_extractor, ModelCheckpoint};
use bcrec::dataset::{
    load_interactions, read_split, split_random, split_temporal, subgroup_partition, write_split, DataSplit, Delimiter,
    SplitFractions, SplitManifest, SplitMember, TemporalRatios,
};
use bcrec::diagnostics::{
    angle_reports, bias_correlation, geometry_report, subgroup_angle_matrix, NegativeSpec, DEFAULT_ANGLE_ITEMS,
    DEFAULT_BIN_WIDTH, DEFAULT_DISPERSION_NEGATIVES,
};
use bcrec::encoders::{EmbeddingTable, EncoderKind, NormalizedAdjacency};
use bcrec::evaluator::{evaluate, EvalReport};
use bcrec::synth::{self, SynthConfig};
use bcrec::trainer::{self, TrainConfig};
use log::info;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::manifest::{hash_file, InputFile, Outputs};
use crate::settings::{finish, flag_map, layer, read_file, take};
use crate::{DiagnoseArgs, Encoder, EvalArgs, Failure, SplitArgs, Strategy, SynthArgs, TrainArgs, Which};

pub const DEFAULT_SEED: u64 = 2022;
pub const DEFAULT_LAYERS: usize = 3;

pub struct Context {
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub config: Option<PathBuf>,
}

impl Context {
    fn layered<T: Serialize, F: Serialize>(&self, defaults: &T, flags: &F) -> Result<Map<String, Value>, Failure> {
        let file = self.config.as_deref().map(read_file).transpose()?;
        let mut flags = flag_map(flags);
        if let Some(s) = self.seed {
            flags.insert("seed".into(), s.into());
        }
        Ok(layer(defaults, file.as_ref(), flags))
    }
}

fn echo(command: &str, config: &Value) {
    println!("{}", serde_json::to_string_pretty(&json!({ "command": command, "config": config })).expect("json"));
}

fn split_inputs(dir: &Path, manifest: &SplitManifest) -> Result<Vec<InputFile>, Failure> {
    manifest.files.iter().map(|f| hash_file(&dir.join(f))).collect()
}

fn load_split(dir: &Path) -> Result<(DataSplit, Vec<InputFile>), Failure> {
    let (split, manifest) = read_split(dir)?;
    let inputs = split_inputs(dir, &manifest)?;
    Ok((split, inputs))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitSettings {
    strategy: Strategy,
    delimiter: String,
    k_core: Option<usize>,
    balanced: Option<f64>,
    train: Option<f64>,
    validation: Option<f64>,
    test: Option<f64>,
    seed: u64,
}

pub fn split(ctx: &Context, args: SplitArgs) -> Result<(), Failure> {
    let defaults = SplitSettings {
        strategy: Strategy::Random,
        delimiter: "tab".into(),
        k_core: None,
        balanced: None,
        train: None,
        validation: None,
        test: None,
        seed: DEFAULT_SEED,
    };
    let mut s: SplitSettings = finish(ctx.layered(&defaults, &args)?, "split")?;
    let delim = Delimiter::parse(&s.delimiter)?;
    let mut ds = load_interactions(&args.input, delim)?;
    let loaded = ds.len();
    if let Some(k) = s.k_core {
        ds = ds.k_core_filter(k)?;
        info!("{k}-core kept {} of {loaded} interactions", ds.len());
    }
    let (split, seed, params) = match s.strategy {
        Strategy::Random => {
            let d = SplitFractions::default();
            let fr = SplitFractions {
                balanced: *s.balanced.get_or_insert(d.balanced),
                train: *s.train.get_or_insert(d.train),
                validation: *s.validation.get_or_insert(d.validation),
                test: *s.test.get_or_insert(d.test),
            };
            (split_random(&ds, fr, s.seed)?, Some(s.seed), serde_json::to_value(fr).expect("json"))
        }
        Strategy::Temporal => {
            if s.balanced.is_some() {
                return Err(Failure::usage("the temporal strategy has no balanced test; drop --balanced"));
            }
            let d = TemporalRatios::default();
            let r = TemporalRatios {
                train: *s.train.get_or_insert(d.train),
                validation: *s.validation.get_or_insert(d.validation),
                test: *s.test.get_or_insert(d.test),
            };
            let split = split_temporal(&ds, r).map_err(|e| match e {
                bcrec::Error::MissingTimestamp { .. } => {
                    Failure::usage(format!("the temporal split strategy needs a timestamp on every interaction: {e}"))
                }
                e => e.into(),
            })?;
            (split, None, serde_json::to_value(r).expect("json"))
        }
    };
    let config = serde_json::to_value(&s).expect("json");
    echo("split", &config);
    let name = match s.strategy {
        Strategy::Random => "random",
        Strategy::Temporal => "temporal",
    };
    let mut params = params;
    params["k_core"] = json!(s.k_core);
    let mut outs = Outputs::new(&ctx.out)?;
    let manifest = write_split(&split, &ctx.out, name, seed, params)?;
    for f in &manifest.files {
        outs.record(f.clone());
    }
    let summary = json!({
        "loaded_interactions": loaded,
        "members": manifest.members,
    });
    outs.finish("split", seed, config, vec![hash_file(&args.input)?], summary)
}

fn encoder_kind(encoder: Encoder, layers: usize) -> EncoderKind {
    match encoder {
        Encoder::Mf => EncoderKind::Mf,
        Encoder::Lightgcn => EncoderKind::LightGcn { layers },
    }
}

/// Resolved training settings: encoder choice plus the trainer config.
fn train_settings(ctx: &Context, args: &TrainArgs) -> Result<(EncoderKind, TrainConfig, Value), Failure> {
    let mut defaults = flag_map(&TrainConfig::default());
    defaults.insert("encoder".into(), json!("mf"));
    defaults.insert("layers".into(), json!(DEFAULT_LAYERS));
    let mut map = ctx.layered(&defaults, args)?;
    let encoder: Encoder = finish_value(take(&mut map, "encoder"), "encoder")?;
    let layers: usize = finish_value(take(&mut map, "layers"), "layers")?;
    let config: TrainConfig = finish(map, "train")?;
    config.validate()?;
    let kind = encoder_kind(encoder, layers);
    let mut echoed = serde_json::to_value(&config).expect("json");
    echoed["encoder"] = json!(encoder);
    echoed["layers"] = json!(layers);
    Ok((kind, config, echoed))
}

fn finish_value<T: serde::de::DeserializeOwned>(v: Option<Value>, key: &str) -> Result<T, Failure> {
    serde_json::from_value(v.unwrap_or(Value::Null)).map_err(|e| Failure::usage(format!("{key}: {e}")))
}

pub const MODEL_FILE: &str = "model.bin";
pub const EXTRACTOR_FILE: &str = "extractor.bin";
pub const METRICS_FILE: &str = "metrics.csv";

pub fn train(ctx: &Context, args: TrainArgs) -> Result<(), Failure> {
    let (kind, config, echoed) = train_settings(ctx, &args)?;
    echo("train", &echoed);
    let (split, inputs) = load_split(&args.split)?;
    let started = Instant::now();
    let outcome = trainer::train(&split, kind, &config)?;
    info!("trained in {:.2}s", started.elapsed().as_secs_f64());
    let r = &outcome.report;

    let mut outs = Outputs::new(&ctx.out)?;
    let ckpt = ModelCheckpoint {
        kind,
        table: outcome.model.table.clone(),
        metadata: json!({
            "config": echoed,
            "best_epoch": r.best_epoch,
            "best_val_recall": r.best_val_recall,
        }),
    };
    ckpt.save(outs.path(MODEL_FILE))?;
    outs.record(MODEL_FILE);
    if let Some(pe) = &outcome.model.extractor {
        save_extractor(pe, outs.path(EXTRACTOR_FILE))?;
        outs.record(EXTRACTOR_FILE);
    }
    outs.write(METRICS_FILE, r.metrics_csv())?;
    let summary = json!({
        "epochs_run": r.epochs.len(),
        "best_epoch": r.best_epoch,
        "best_val_recall": r.best_val_recall,
        "stop_reason": r.stop_reason,
        "extractor_phase": r.extractor_phase,
    });
    outs.finish("train", Some(config.seed), echoed, inputs, summary)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalSettings {
    k: usize,
    members: Vec<String>,
    subgroups: bool,
}

fn load_model(path: &Path, split: &DataSplit) -> Result<(ModelCheckpoint, EmbeddingTable, InputFile), Failure> {
    let ckpt = ModelCheckpoint::load(path)?;
    let t = &ckpt.table;
    if t.num_users() != split.train.num_users() || t.num_items() != split.train.num_items() {
        return Err(Failure::usage(format!(
            "model is {}x{} but the split has {} users and {} items",
            t.num_users(),
            t.num_items(),
            split.train.num_users(),
            split.train.num_items()
        )));
    }
    let adj = matches!(ckpt.kind, EncoderKind::LightGcn { .. }).then(|| NormalizedAdjacency::from_dataset(&split.train));
    let reps = bcrec::encoders::representations(ckpt.kind, &ckpt.table, adj.as_ref())?.into_owned();
    Ok((ckpt, reps, hash_file(path)?))
}

pub fn eval(ctx: &Context, args: EvalArgs) -> Result<(), Failure> {
    let defaults = EvalSettings {
        k: bcrec::evaluator::DEFAULT_K,
        members: Vec::new(),
        subgroups: true,
    };
    let mut map = ctx.layered(&defaults, &args)?;
    // evaluation is deterministic; a global seed has nothing to drive
    map.remove("seed");
    let s: EvalSettings = finish(map, "eval")?;
    if s.k == 0 {
        return Err(Failure::usage("k must be >= 1"));
    }
    let config = serde_json::to_value(&s).expect("json");
    echo("eval", &config);
    let (split, mut inputs) = load_split(&args.split)?;
    let (_, reps, model_hash) = load_model(&args.model, &split)?;
    inputs.insert(0, model_hash);

    let members: Vec<SplitMember> = if s.members.is_empty() {
        [SplitMember::TestImbalanced, SplitMember::TestBalanced, SplitMember::TestTemporal]
            .into_iter()
            .filter(|m| split.member(*m).is_some_and(|d| !d.is_empty()))
            .collect()
    } else {
        s.members
            .iter()
            .map(|n| SplitMember::parse(n).ok_or_else(|| Failure::usage(format!("unknown split member {n:?}"))))
            .collect::<Result<_, _>>()?
    };
    if members.is_empty() {
        return Err(Failure::usage("the split has no non-empty test member to evaluate"));
    }
    let labels = subgroup_partition(split.train.item_pop());
    let scorer = bcrec::encoders::Scorer::from_representations(reps);
    let mut reports = Vec::new();
    for m in members {
        let ds = split
            .member(m)
            .ok_or_else(|| Failure::usage(format!("split has no {} member", m.as_str())))?;
        let mut r = evaluate(&scorer, &split.train, ds, &labels, s.k, m.as_str())?;
        if !s.subgroups {
            r.subgroups.clear();
        }
        reports.push(r);
    }
    let report = EvalReport::new(s.k, reports);
    let mut outs = Outputs::new(&ctx.out)?;
    outs.write_json("eval.json", &report)?;
    outs.write("eval.csv", report.to_csv()?)?;
    let summary = json!(report
        .members
        .iter()
        .map(|m| (m.member.clone(), json!({"recall": m.overall.recall, "ndcg": m.overall.ndcg, "hr": m.overall.hr})))
        .collect::<Map<String, Value>>());
    outs.finish("eval", None, config, inputs, summary)
}

pub fn synth(ctx: &Context, args: SynthArgs) -> Result<(), Failure> {
    let defaults = SynthConfig {
        seed: DEFAULT_SEED,
        ..Default::default()
    };
    let cfg: SynthConfig = finish(ctx.layered(&defaults, &args)?, "synth")?;
    let config = serde_json::to_value(&cfg).expect("json");
    echo("synth", &config);
    let data = synth::generate(&cfg)?;
    let mut outs = Outputs::new(&ctx.out)?;
    let manifest = synth::write(&data, &cfg, &ctx.out)?;
    for f in &manifest.files {
        outs.record(f.clone());
    }
    let summary = json!({
        "observed_interactions": manifest.observed_interactions,
        "truth_interactions": manifest.truth_interactions,
        "observed_item_kl": manifest.observed_item_kl,
        "truth_item_kl": manifest.truth_item_kl,
    });
    outs.finish("synth", Some(cfg.seed), config, Vec::new(), summary)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DiagnoseSettings {
    bin_width: f64,
    items_per_user: usize,
    negatives: String,
    margin_strength: f64,
    seed: u64,
}

fn negative_spec(s: &DiagnoseSettings) -> Result<NegativeSpec, Failure> {
    if s.negatives == "full" {
        return Ok(NegativeSpec::Full);
    }
    let per_user = s
        .negatives
        .parse()
        .map_err(|_| Failure::usage(format!("negatives must be `full` or a count, got {:?}", s.negatives)))?;
    Ok(NegativeSpec::Sampled { per_user, seed: s.seed })
}

pub fn diagnose(ctx: &Context, args: DiagnoseArgs) -> Result<(), Failure> {
    let defaults = DiagnoseSettings {
        bin_width: DEFAULT_BIN_WIDTH,
        items_per_user: DEFAULT_ANGLE_ITEMS,
        negatives: DEFAULT_DISPERSION_NEGATIVES.to_string(),
        margin_strength: 1.0,
        seed: 0,
    };
    let s: DiagnoseSettings = finish(ctx.layered(&defaults, &args)?, "diagnose")?;
    let which = args.which;
    let needs_model = matches!(which, Which::Angles | Which::Geometry);
    let needs_extractor = matches!(which, Which::BiasCorr | Which::SubgroupMatrix | Which::BiasReport);
    let name = which_name(which);
    if needs_model && args.model.is_none() {
        return Err(Failure::usage(format!("diagnose {name} requires --model")));
    }
    if needs_extractor && args.extractor.is_none() {
        return Err(Failure::usage(format!("diagnose {name} requires --extractor (written by training with the bc loss)")));
    }
    let spec = negative_spec(&s)?;
    let config = serde_json::to_value(&s).expect("json");
    echo("diagnose", &config);

    let (split, mut inputs) = load_split(&args.split)?;
    let train = &split.train;
    let reps = match &args.model {
        Some(p) => {
            let (_, reps, h) = load_model(p, &split)?;
            inputs.push(h);
            Some(reps)
        }
        None => None,
    };
    let pe = match &args.extractor {
        Some(p) if needs_extractor => {
            inputs.push(hash_file(p)?);
            Some(load_extractor(p)?)
        }
        _ => None,
    };

    let mut outs = Outputs::new(&ctx.out)?;
    let stem = name.replace('-', "_");
    let summary = match which {
        Which::Angles => {
            let r = angle_reports(reps.as_ref().expect("checked"), train, s.items_per_user, s.bin_width, s.seed)?;
            outs.write_json(&format!("{stem}.json"), &r)?;
            outs.write(&format!("{stem}.csv"), r.to_csv())?;
            json!({"fraction_positive_closer": r.fraction_positive_closer, "eligible_users": r.eligible_users})
        }
        Which::Geometry => {
            let r = geometry_report(reps.as_ref().expect("checked"), train, spec)?;
            outs.write_json(&format!("{stem}.json"), &r)?;
            outs.write(&format!("{stem}.csv"), r.to_csv())?;
            json!({"compactness_sum": r.compactness_sum, "dispersion_sum": r.dispersion_sum})
        }
        Which::BiasCorr => {
            let r = bias_correlation(pe.as_ref().expect("checked"), train)?;
            outs.write_json(&format!("{stem}.json"), &r)?;
            outs.write(&format!("{stem}.csv"), r.to_csv())?;
            json!({"pearson_item_log": r.pearson_item_log, "pearson_user_log": r.pearson_user_log})
        }
        Which::SubgroupMatrix => {
            let r = subgroup_angle_matrix(pe.as_ref().expect("checked"), train)?;
            outs.write_json(&format!("{stem}.json"), &r)?;
            outs.write(&format!("{stem}.csv"), r.to_csv())?;
            json!({"cells": r.cells.len()})
        }
        Which::BiasReport => {
            let csv = bias_report_csv(pe.as_ref().expect("checked"), train, s.margin_strength, reps.as_ref())?;
            outs.write(&format!("{stem}.csv"), csv)?;
            json!({"rows": train.len(), "capped_by_model": reps.is_some()})
        }
    };
    outs.finish(&format!("diagnose {name}"), Some(s.seed), config, inputs, summary)
}

fn which_name(w: Which) -> &'static str {
    match w {
        Which::Angles => "angles",
        Which::Geometry => "geometry",
        Which::BiasCorr => "bias-corr",
        Which::SubgroupMatrix => "subgroup-matrix",
        Which::BiasReport => "bias-report",
    }
}
