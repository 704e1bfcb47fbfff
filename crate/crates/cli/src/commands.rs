use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::Args;
use log::info;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use lagdiff::data::{self, ConceptSpec, CorpusItem};
use lagdiff::eval::{self, AblationPlan, ConceptInput, EvalReport, EvalRow, Probe, ReportFormat, SweepSampling, Variant};
use lagdiff::net::{self, ArchConfig, PretrainConfig, TrainExample, UNetWeights};
use lagdiff::residuals::{self, PersonalizeConfig, RankRule, TargetSelector};
use lagdiff::sampler::{self, MaskRule, SampleRequest};
use lagdiff::text::Vocabulary;
use lagdiff::{Error, Tensor};

use crate::config::{echo, load_file, required, resolve};
use crate::CliError;

type CliResult<T = ()> = Result<T, CliError>;

pub struct Global {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub config: Option<PathBuf>,
}

fn settle<D>(g: &Global, command: &str, defaults: D, mut flags: Map<String, Value>) -> CliResult<D>
where
    D: Serialize + serde::de::DeserializeOwned,
{
    if let Some(s) = g.seed {
        flags.insert("seed".into(), json!(s));
    }
    if let Some(t) = g.threads {
        flags.insert("threads".into(), json!(t));
    }
    let resolved = resolve(&defaults, load_file(g.config.as_deref(), command)?, &flags)?;
    echo(command, &resolved);
    Ok(resolved)
}

fn flags(pairs: Vec<(&str, Value)>) -> Map<String, Value> {
    pairs
        .into_iter()
        .filter(|(_, v)| !v.is_null())
        .map(|(k, v)| (k.to_string(), v))
        .collect()
}

fn on(b: bool) -> Value {
    if b {
        json!(true)
    } else {
        Value::Null
    }
}

fn write_file(path: &Path, contents: &[u8]) -> CliResult {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn load_images(dir: &Path) -> CliResult<Vec<Tensor>> {
    if !dir.is_dir() {
        return Err(CliError::Usage(format!("{} is not a directory", dir.display())));
    }
    if dir.join(data::MANIFEST_FILE).exists() {
        Ok(data::load_dataset(dir)?.1)
    } else {
        Ok(data::load_image_dir(dir)?.into_iter().map(|(_, t)| t).collect())
    }
}

fn load_model(path: &Path) -> CliResult<(UNetWeights, Vocabulary)> {
    if !path.exists() {
        return Err(CliError::Usage(format!("model path {} does not exist", path.display())));
    }
    let (w, v, _) = net::load_model(path)?;
    Ok((w, v))
}

fn check_exists(path: &Path, what: &str) -> CliResult {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} does not exist", path.display())))
    }
}

fn short_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().take(8).map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------- gen-data

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// pretrain or concept.
    #[arg(long)]
    kind: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of pretraining images.
    #[arg(long)]
    n: Option<usize>,
    /// Concept spec JSON file.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Built-in concept id (spotted_dog, striped_car, split_cat).
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct GenData {
    kind: String,
    out: Option<PathBuf>,
    n: usize,
    spec: Option<PathBuf>,
    preset: Option<String>,
    seed: u64,
}

pub fn gen_data(g: &Global, a: GenDataArgs) -> CliResult {
    let defaults = GenData {
        kind: "pretrain".into(),
        out: None,
        n: 512,
        spec: None,
        preset: None,
        seed: 0,
    };
    let c = settle(
        g,
        "gen-data",
        defaults,
        flags(vec![
            ("kind", json!(a.kind)),
            ("out", json!(a.out)),
            ("n", json!(a.n)),
            ("spec", json!(a.spec)),
            ("preset", json!(a.preset)),
        ]),
    )?;
    let out = required(&c.out, "out")?;
    match c.kind.as_str() {
        "pretrain" => {
            let items = data::gen_pretrain_corpus(c.seed, c.n)?;
            data::write_dataset(&out, &items, "pretrain", None)?;
            info!("event=gen_data kind=pretrain images={} out={}", items.len(), out.display());
        }
        "concept" => {
            let spec: ConceptSpec = match (&c.spec, &c.preset) {
                (Some(p), _) => {
                    check_exists(p, "spec file")?;
                    let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                    serde_json::from_str(&text).map_err(Error::from)?
                }
                (None, preset) => {
                    let id = preset.clone().unwrap_or_else(|| ConceptSpec::presets()[0].id.clone());
                    ConceptSpec::presets()
                        .into_iter()
                        .find(|s| s.id == id)
                        .ok_or_else(|| CliError::Usage(format!("unknown preset {id:?}")))?
                }
            };
            let items: Vec<CorpusItem> = data::gen_concept(&spec, c.seed)?;
            data::write_dataset(&out, &items, "reference", Some(&spec.id))?;
            let spec_json = serde_json::to_string_pretty(&spec).map_err(Error::from)?;
            write_file(&out.join(CONCEPT_FILE), spec_json.as_bytes())?;
            info!("event=gen_data kind=concept concept={} images={} out={}", spec.id, items.len(), out.display());
        }
        other => return Err(CliError::Usage(format!("--kind must be pretrain or concept, got {other:?}"))),
    }
    Ok(())
}

pub const CONCEPT_FILE: &str = "concept.json";

// ---------------------------------------------------------------- pretrain

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Corpus directory written by gen-data.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output model directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Pretrain {
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    steps: usize,
    batch_size: usize,
    learning_rate: f64,
    prompt_dropout: f64,
    train_text_embeddings: bool,
    arch: ArchConfig,
    seed: u64,
}

pub fn pretrain(g: &Global, a: PretrainArgs) -> CliResult {
    let d = PretrainConfig::default();
    let defaults = Pretrain {
        data: None,
        out: None,
        steps: d.steps,
        batch_size: d.batch_size,
        learning_rate: d.learning_rate,
        prompt_dropout: d.prompt_dropout,
        train_text_embeddings: d.train_text_embeddings,
        arch: ArchConfig::default(),
        seed: 0,
    };
    let c = settle(
        g,
        "pretrain",
        defaults,
        flags(vec![
            ("data", json!(a.data)),
            ("out", json!(a.out)),
            ("steps", json!(a.steps)),
            ("batch_size", json!(a.batch_size)),
            ("learning_rate", json!(a.lr)),
        ]),
    )?;
    let data_dir = required(&c.data, "data")?;
    let out = required(&c.out, "out")?;
    check_exists(&data_dir, "data directory")?;
    c.arch.validate()?;
    let (manifest, images) = data::load_dataset(&data_dir)?;
    let examples: Vec<TrainExample> = manifest
        .entries
        .iter()
        .zip(images)
        .map(|(e, image)| TrainExample {
            image,
            caption: e.caption.clone(),
        })
        .collect();
    let vocab = data::toy_vocabulary(c.arch.d_txt, c.seed)?;
    let init = UNetWeights::init(&c.arch, c.seed)?;
    let cfg = PretrainConfig {
        steps: c.steps,
        batch_size: c.batch_size,
        learning_rate: c.learning_rate,
        prompt_dropout: c.prompt_dropout,
        train_text_embeddings: c.train_text_embeddings,
        seed: c.seed,
    };
    let result = net::pretrain(&init, &vocab, &examples, &cfg)?;
    let training = json!({
        "config": cfg,
        "examples": examples.len(),
        "null_prompts": result.null_prompts,
        "final_loss": result.losses.last(),
    });
    let manifest = net::save_model(&out, &result.weights, &result.vocab, training)?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in result.losses.iter().enumerate() {
        csv.push_str(&format!("{i},{l:.6}\n"));
    }
    write_file(&out.join("loss.csv"), csv.as_bytes())?;
    info!(
        "event=pretrain_done out={} weights_hash={} null_prompts={} final_loss={:.6}",
        out.display(),
        manifest.weights_hash,
        result.null_prompts,
        result.losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

// ------------------------------------------------------------- personalize

#[derive(Debug, Args)]
pub struct PersonalizeArgs {
    /// Model directory (or its model.json).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Directory of reference images.
    #[arg(long)]
    refs: Option<PathBuf>,
    /// Macro class word, or "auto" to pick it from the references.
    #[arg(long = "macro")]
    macro_class: Option<String>,
    /// Output residual file.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// proj_out, kv, proj_in, kv+proj_out or kv+proj_in+proj_out.
    #[arg(long)]
    target: Option<String>,
    /// Train with the template that omits the macro class.
    #[arg(long)]
    no_macro_class: bool,
    /// Mix one same-class distractor into every batch.
    #[arg(long)]
    reg_images: bool,
    /// Also train the identifier embedding.
    #[arg(long)]
    update_token: bool,
    /// Fixed rank (e.g. 4) or fraction of the width (e.g. 0.05m).
    #[arg(long)]
    rank: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Personalize {
    model: Option<PathBuf>,
    refs: Option<PathBuf>,
    macro_class: Option<String>,
    out: Option<PathBuf>,
    iterations: usize,
    batch_size: usize,
    learning_rate: f64,
    target: String,
    use_macro_class: bool,
    use_reg_images: bool,
    update_token_embedding: bool,
    rank: String,
    reg_count: usize,
    seed: u64,
}

pub fn parse_rank(s: &str) -> CliResult<RankRule> {
    let bad = || CliError::Usage(format!("rank must be an integer or a fraction like 0.05m, got {s:?}"));
    match s.strip_suffix('m') {
        Some(f) => f.parse().map(RankRule::Fraction).map_err(|_| bad()),
        None => s.parse().map(RankRule::Fixed).map_err(|_| bad()),
    }
}

pub fn personalize(g: &Global, a: PersonalizeArgs) -> CliResult {
    let d = PersonalizeConfig::default();
    let defaults = Personalize {
        model: None,
        refs: None,
        macro_class: None,
        out: None,
        iterations: d.iterations,
        batch_size: d.batch_size,
        learning_rate: d.learning_rate,
        target: "proj_out".into(),
        use_macro_class: true,
        use_reg_images: false,
        update_token_embedding: false,
        rank: "0.05m".into(),
        reg_count: 8,
        seed: 0,
    };
    let c = settle(
        g,
        "personalize",
        defaults,
        flags(vec![
            ("model", json!(a.model)),
            ("refs", json!(a.refs)),
            ("macro_class", json!(a.macro_class)),
            ("out", json!(a.out)),
            ("iterations", json!(a.iterations)),
            ("batch_size", json!(a.batch_size)),
            ("learning_rate", json!(a.lr)),
            ("target", json!(a.target)),
            ("use_macro_class", if a.no_macro_class { json!(false) } else { Value::Null }),
            ("use_reg_images", on(a.reg_images)),
            ("update_token_embedding", on(a.update_token)),
            ("rank", json!(a.rank)),
        ]),
    )?;
    let model = required(&c.model, "model")?;
    let refs_dir = required(&c.refs, "refs")?;
    let macro_class = required(&c.macro_class, "macro")?;
    let out = required(&c.out, "out")?;
    let cfg = PersonalizeConfig {
        iterations: c.iterations,
        batch_size: c.batch_size,
        learning_rate: c.learning_rate,
        target: TargetSelector::parse(&c.target).map_err(|e| CliError::Usage(e.to_string()))?,
        use_macro_class: c.use_macro_class,
        use_reg_images: c.use_reg_images,
        update_token_embedding: c.update_token_embedding,
        rank: parse_rank(&c.rank)?,
    };
    let (w, vocab) = load_model(&model)?;
    let refs = load_images(&refs_dir)?;
    let macro_class = if macro_class == "auto" {
        let probe = Probe::new(&w, &vocab)?;
        let picked = eval::macro_class_nn(&refs, &vocab, &probe)?;
        info!("event=macro_class_selected class={picked}");
        picked
    } else {
        macro_class
    };
    let reg = if cfg.use_reg_images {
        data::gen_class_images(&macro_class, c.reg_count, c.seed)?
    } else {
        Vec::new()
    };
    let result = residuals::personalize(&w, &vocab, &refs, &macro_class, &reg, &cfg, c.seed)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    residuals::save_residuals(&result.residuals, &out)?;
    info!(
        "event=personalize_done out={} prompt={:?} params={} config_hash={} initial_eval_loss={:.6} final_eval_loss={:.6} ratio={:.6}",
        out.display(),
        result.prompt,
        result.residuals.param_count(),
        result.residuals.meta.config_hash,
        result.initial_eval_loss,
        result.final_eval_loss,
        result.final_eval_loss / result.initial_eval_loss
    );
    Ok(())
}

// ------------------------------------------------------------------ sample

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    guidance: Option<f64>,
    /// Residual file for the concept.
    #[arg(long)]
    residuals: Option<PathBuf>,
    /// Localized attention-guided sampling.
    #[arg(long)]
    lag: bool,
    /// aggregate_then_binarize or per_head_union.
    #[arg(long)]
    mask_rule: Option<String>,
    /// Directory for per-block, per-step mask PGMs.
    #[arg(long)]
    dump_masks: Option<PathBuf>,
    /// Directory of masks (as dumped) to apply instead of computed ones.
    #[arg(long)]
    inject_masks: Option<PathBuf>,
    /// Output PPM image.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Sample {
    model: Option<PathBuf>,
    prompt: Option<String>,
    steps: usize,
    eta: f64,
    guidance: f64,
    residuals: Option<PathBuf>,
    lag: bool,
    mask_rule: MaskRule,
    dump_masks: Option<PathBuf>,
    inject_masks: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: u64,
}

pub fn sample(g: &Global, a: SampleArgs, inspect: bool) -> CliResult {
    let d = SampleRequest::default();
    let defaults = Sample {
        model: None,
        prompt: None,
        steps: d.steps,
        eta: d.eta,
        guidance: d.guidance,
        residuals: None,
        lag: false,
        mask_rule: MaskRule::default(),
        dump_masks: None,
        inject_masks: None,
        out: None,
        seed: 0,
    };
    let command = if inspect { "inspect-masks" } else { "sample" };
    let c = settle(
        g,
        command,
        defaults,
        flags(vec![
            ("model", json!(a.model)),
            ("prompt", json!(a.prompt)),
            ("steps", json!(a.steps)),
            ("eta", json!(a.eta)),
            ("guidance", json!(a.guidance)),
            ("residuals", json!(a.residuals)),
            ("lag", on(a.lag)),
            ("mask_rule", json!(a.mask_rule)),
            ("dump_masks", json!(a.dump_masks)),
            ("inject_masks", json!(a.inject_masks)),
            ("out", json!(a.out)),
        ]),
    )?;
    let model = required(&c.model, "model")?;
    let prompt = required(&c.prompt, "prompt")?;
    if inspect {
        if !c.lag {
            return Err(CliError::Usage("inspect-masks requires --lag".into()));
        }
        required(&c.dump_masks, "dump-masks")?;
    } else {
        required(&c.out, "out")?;
    }
    if (c.dump_masks.is_some() || c.inject_masks.is_some()) && !c.lag {
        return Err(CliError::Usage("mask dumps and injection require --lag".into()));
    }
    if c.lag && c.residuals.is_none() {
        return Err(CliError::Usage("--lag requires --residuals".into()));
    }
    let (w, vocab) = load_model(&model)?;
    let rs = match &c.residuals {
        Some(p) => {
            check_exists(p, "residual file")?;
            Some(residuals::load_residuals(p)?)
        }
        None => None,
    };
    let injected = match &c.inject_masks {
        Some(dir) => {
            check_exists(dir, "mask directory")?;
            Some(Arc::new(sampler::load_masks(dir)?))
        }
        None => None,
    };
    let req = SampleRequest {
        prompt,
        seed: c.seed,
        steps: c.steps,
        eta: c.eta,
        guidance: c.guidance,
        lag: c.lag,
        mask_rule: c.mask_rule,
        noise_seed: None,
    };
    let out = sampler::sample(&req, &w, &vocab, rs.as_ref(), injected)?;
    if let Some(path) = &c.out {
        write_file(path, &data::encode_ppm(&out.image)?)?;
    }
    if let (Some(dir), Some(masks)) = (&c.dump_masks, &out.masks) {
        sampler::save_masks(masks, dir)?;
        let blocks = w.config.num_blocks();
        for b in 0..blocks {
            let cov: Vec<f64> = masks.records.iter().filter(|r| r.block == b).map(|r| r.mask.coverage()).collect();
            let mean = cov.iter().sum::<f64>() / cov.len().max(1) as f64;
            info!("event=mask_coverage block={b} masks={} mean_coverage={mean:.6}", cov.len());
        }
    }
    info!(
        "event=sample_done evaluations={} zt_hash={} image_hash={} masks={}",
        out.evaluations,
        out.zt_hash,
        sampler::tensor_hash(&out.image),
        out.masks.as_ref().map_or(0, |m| m.len())
    );
    Ok(())
}

// ------------------------------------------------------------------ ablate

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Plan JSON.
    #[arg(long)]
    plan: Option<PathBuf>,
    /// Directory of concept directories written by gen-data --kind concept.
    #[arg(long)]
    concepts: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Report path (.csv or .json).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Ablate {
    plan: Option<PathBuf>,
    concepts: Option<PathBuf>,
    model: Option<PathBuf>,
    out: Option<PathBuf>,
    threads: usize,
    seed: u64,
}

/// Plan file: explicit variants and/or a rank sweep. The standard variant
/// set is used when neither is given.
#[derive(Debug, Deserialize)]
struct PlanFile {
    #[serde(default)]
    variants: Option<Vec<Variant>>,
    #[serde(default)]
    ranks: Vec<RankRule>,
    prompts: Vec<String>,
    seeds: Vec<u64>,
    #[serde(default)]
    sampling: SweepSampling,
}

fn load_concepts(dir: &Path, seed: u64) -> CliResult<Vec<ConceptInput>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(CONCEPT_FILE).exists())
        .collect();
    if dir.join(CONCEPT_FILE).exists() {
        dirs.push(dir.to_path_buf());
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(CliError::Usage(format!("no concept directories under {}", dir.display())));
    }
    dirs.iter()
        .map(|d| {
            let p = d.join(CONCEPT_FILE);
            let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            let spec: ConceptSpec = serde_json::from_str(&text).map_err(Error::from)?;
            Ok(ConceptInput {
                regularization: data::gen_class_images(&spec.macro_class, 8, seed)?,
                references: data::load_dataset(d)?.1,
                macro_class: spec.macro_class,
                id: spec.id,
            })
        })
        .collect()
}

pub fn ablate(g: &Global, a: AblateArgs) -> CliResult {
    let defaults = Ablate {
        plan: None,
        concepts: None,
        model: None,
        out: None,
        threads: 1,
        seed: 0,
    };
    let c = settle(
        g,
        "ablate",
        defaults,
        flags(vec![
            ("plan", json!(a.plan)),
            ("concepts", json!(a.concepts)),
            ("model", json!(a.model)),
            ("out", json!(a.out)),
        ]),
    )?;
    let plan_path = required(&c.plan, "plan")?;
    let concepts_dir = required(&c.concepts, "concepts")?;
    let model = required(&c.model, "model")?;
    let out = required(&c.out, "out")?;
    check_exists(&plan_path, "plan file")?;
    let text = fs::read_to_string(&plan_path).map_err(|e| Error::io(&plan_path, e))?;
    let file: PlanFile = serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("plan file: {e}")))?;
    let mut variants = file.variants.unwrap_or_default();
    variants.extend(AblationPlan::rank_sweep(&file.ranks));
    if variants.is_empty() {
        variants = AblationPlan::standard_variants();
    }
    let plan = AblationPlan {
        variants,
        prompts: file.prompts,
        seeds: file.seeds,
        sampling: file.sampling,
        train_seed: c.seed,
    }
    .normalized();
    plan.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let (w, vocab) = load_model(&model)?;
    let concepts = load_concepts(&concepts_dir, c.seed)?;
    let probe = Probe::new(&w, &vocab)?;
    let report = eval::run_ablations(&plan, &w, &vocab, &concepts, &probe, c.threads)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    eval::emit_report(&report, &out, ReportFormat::from_path(&out))?;
    for m in report.means() {
        info!(
            "event=variant_mean variant={:?} text_align={:.6} image_align={:.6} rows={} failures={}",
            m.variant, m.text_align, m.image_align, m.rows, m.failures
        );
    }
    Ok(())
}

// -------------------------------------------------------------------- eval

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of generated images.
    #[arg(long)]
    images: Option<PathBuf>,
    /// Directory of reference images.
    #[arg(long)]
    refs: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Prompt used for text alignment (defaults to the references' class).
    #[arg(long)]
    prompt: Option<String>,
    /// Report path (.json or .csv).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Eval {
    images: Option<PathBuf>,
    refs: Option<PathBuf>,
    model: Option<PathBuf>,
    prompt: Option<String>,
    out: Option<PathBuf>,
    seed: u64,
}

pub fn eval(g: &Global, a: EvalArgs) -> CliResult {
    let defaults = Eval {
        images: None,
        refs: None,
        model: None,
        prompt: None,
        out: None,
        seed: 0,
    };
    let c = settle(
        g,
        "eval",
        defaults,
        flags(vec![
            ("images", json!(a.images)),
            ("refs", json!(a.refs)),
            ("model", json!(a.model)),
            ("prompt", json!(a.prompt)),
            ("out", json!(a.out)),
        ]),
    )?;
    let images_dir = required(&c.images, "images")?;
    let refs_dir = required(&c.refs, "refs")?;
    let model = required(&c.model, "model")?;
    let out = required(&c.out, "out")?;
    check_exists(&images_dir, "image directory")?;
    let refs = load_images(&refs_dir)?;
    let spec: Option<ConceptSpec> = fs::read_to_string(refs_dir.join(CONCEPT_FILE))
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok());
    let concept = spec.as_ref().map_or_else(
        || refs_dir.file_name().map_or("refs".into(), |n| n.to_string_lossy().into_owned()),
        |s| s.id.clone(),
    );
    let (w, vocab) = load_model(&model)?;
    let probe = Probe::new(&w, &vocab)?;
    let prompt = match (&c.prompt, &spec) {
        (Some(p), _) => p.clone(),
        (None, Some(s)) => format!("a photo of a {}", s.macro_class),
        (None, None) => format!("a photo of a {}", eval::macro_class_nn(&refs, &vocab, &probe)?),
    };
    let scored = json!({ "refs": c.refs, "model": c.model, "prompt": prompt, "seed": c.seed });
    let config_hash = short_hash(scored.to_string().as_bytes());
    let mut rows = Vec::new();
    for (path, img) in data::load_image_dir(&images_dir)? {
        let row = (|| -> lagdiff::Result<EvalRow> {
            Ok(EvalRow {
                concept: concept.clone(),
                prompt: prompt.clone(),
                variant: path.file_stem().map_or(String::new(), |s| s.to_string_lossy().into_owned()),
                seed: c.seed,
                text_align: eval::toy_text_alignment(&img, &prompt, &vocab, &probe)?,
                image_align: eval::toy_image_alignment(&img, &refs)?,
                runtime_ms: 0,
                config_hash: config_hash.clone(),
                zt_hash: String::new(),
                error: None,
            })
        })();
        rows.push(row?);
    }
    let report = EvalReport { rows };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    eval::emit_report(&report, &out, ReportFormat::from_path(&out))?;
    info!("event=eval_done rows={} out={}", report.rows.len(), out.display());
    Ok(())
}

// ------------------------------------------------------------ param-report

#[derive(Debug, Args)]
pub struct ParamReportArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    /// Residual file; the default rank rule is used when omitted.
    #[arg(long)]
    residuals: Option<PathBuf>,
    /// Also write the report JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamReportCfg {
    model: Option<PathBuf>,
    residuals: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: u64,
}

pub fn param_report(g: &Global, a: ParamReportArgs) -> CliResult {
    let defaults = ParamReportCfg {
        model: None,
        residuals: None,
        out: None,
        seed: 0,
    };
    let c = settle(
        g,
        "param-report",
        defaults,
        flags(vec![
            ("model", json!(a.model)),
            ("residuals", json!(a.residuals)),
            ("out", json!(a.out)),
        ]),
    )?;
    let model = required(&c.model, "model")?;
    let (w, _) = load_model(&model)?;
    let rs = match &c.residuals {
        Some(p) => {
            check_exists(p, "residual file")?;
            residuals::load_residuals(p)?
        }
        None => residuals::init_residuals(&w, &PersonalizeConfig::default(), c.seed)?,
    };
    let report = residuals::param_report(&rs, &w);
    let ranks: Vec<Option<usize>> = rs.ranks(residuals::TargetLayer::ProjOut);
    let text = serde_json::to_string_pretty(&json!({
        "residual_params": report.residual_params,
        "base_params": report.base_params,
        "ratio": report.ratio,
        "proj_out_ranks": ranks,
        "widths": w.config.widths,
    }))
    .map_err(Error::from)?;
    println!("{text}");
    if let Some(p) = &c.out {
        write_file(p, text.as_bytes())?;
    }
    info!(
        "event=param_report residual_params={} base_params={} ratio={:.6}",
        report.residual_params, report.base_params, report.ratio
    );
    Ok(())
}
