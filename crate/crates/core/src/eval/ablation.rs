use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::metrics::{toy_image_alignment, toy_text_alignment, Probe};
use crate::net::UNetWeights;
use crate::residuals::{personalize, PersonalizeConfig, RankRule, ResidualSet, TargetSelector};
use crate::sampler::{sample, vocab_for, SampleRequest};
use crate::tensor::Tensor;
use crate::text::{Vocabulary, CONCEPT_TOKEN};

pub const CSV_HEADER: &str = "concept,prompt,variant,seed,text_align,image_align,runtime_ms,config_hash";
pub const DEFAULT_LABEL: &str = "ours";

/// What a variant samples with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    /// Personalize with the variant's config.
    #[default]
    Trained,
    /// Personalize, then zero every factor.
    ZeroResidual,
    /// Raw base model, no residuals.
    Base,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub label: String,
    #[serde(default)]
    pub kind: VariantKind,
    #[serde(default)]
    pub config: PersonalizeConfig,
}

impl Variant {
    pub fn trained(label: &str, config: PersonalizeConfig) -> Self {
        Self {
            label: label.into(),
            kind: VariantKind::Trained,
            config,
        }
    }
}

/// Sampling settings shared by every row of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSampling {
    pub steps: usize,
    pub guidance: f64,
    pub lag: bool,
}

impl Default for SweepSampling {
    fn default() -> Self {
        Self {
            steps: crate::sampler::DEFAULT_STEPS,
            guidance: crate::sampler::DEFAULT_GUIDANCE,
            lag: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationPlan {
    pub variants: Vec<Variant>,
    /// Prompt templates; `{class}` is replaced by the concept's macro class.
    pub prompts: Vec<String>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub sampling: SweepSampling,
    /// Seed for personalization.
    #[serde(default)]
    pub train_seed: u64,
}

impl AblationPlan {
    /// Target and training-setting variants, with the default as reference row.
    pub fn standard_variants() -> Vec<Variant> {
        let d = PersonalizeConfig::default;
        let with = |f: &dyn Fn(&mut PersonalizeConfig)| {
            let mut c = d();
            f(&mut c);
            c
        };
        vec![
            Variant::trained("kv", with(&|c| c.target = TargetSelector::Kv)),
            Variant::trained("proj_in", with(&|c| c.target = TargetSelector::ProjIn)),
            Variant::trained("kv+proj_out", with(&|c| c.target = TargetSelector::KvProjOut)),
            Variant::trained("kv+proj_in+proj_out", with(&|c| c.target = TargetSelector::KvProjInProjOut)),
            Variant::trained("no_macro_class", with(&|c| c.use_macro_class = false)),
            Variant::trained("reg_images", with(&|c| c.use_reg_images = true)),
            Variant::trained("update_token", with(&|c| c.update_token_embedding = true)),
            Variant::trained(DEFAULT_LABEL, d()),
        ]
    }

    /// One variant per rank rule, otherwise default.
    pub fn rank_sweep(ranks: &[RankRule]) -> Vec<Variant> {
        ranks
            .iter()
            .map(|&rank| {
                Variant::trained(
                    &format!("rank={}", rank.label()),
                    PersonalizeConfig {
                        rank,
                        ..PersonalizeConfig::default()
                    },
                )
            })
            .collect()
    }

    pub fn sweep_ranks() -> Vec<RankRule> {
        let mut r: Vec<RankRule> = [1, 8, 16, 32, 64, 128].into_iter().map(RankRule::Fixed).collect();
        r.push(RankRule::Fraction(0.025));
        r.push(RankRule::Fraction(0.05));
        r
    }

    /// Ensures the default configuration appears exactly once.
    pub fn normalized(mut self) -> Self {
        let default = PersonalizeConfig::default();
        let is_ref = |v: &Variant| v.kind == VariantKind::Trained && v.config == default;
        let mut seen = false;
        self.variants.retain(|v| {
            if is_ref(v) {
                let keep = !seen;
                seen = true;
                keep
            } else {
                true
            }
        });
        if !seen {
            self.variants.push(Variant::trained(DEFAULT_LABEL, default));
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() || self.prompts.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("plan needs variants, prompts and seeds".into()));
        }
        let mut labels: Vec<&str> = self.variants.iter().map(|v| v.label.as_str()).collect();
        labels.sort_unstable();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("variant labels must be unique".into()));
        }
        self.variants.iter().try_for_each(|v| v.config.validate())
    }
}

/// A concept to personalize: identifier, macro class and reference images.
#[derive(Debug, Clone)]
pub struct ConceptInput {
    pub id: String,
    pub macro_class: String,
    pub references: Vec<Tensor>,
    /// Same-class distractors for the regularization-image variant.
    pub regularization: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub concept: String,
    pub prompt: String,
    pub variant: String,
    pub seed: u64,
    pub text_align: f64,
    pub image_align: f64,
    pub runtime_ms: u64,
    pub config_hash: String,
    pub zt_hash: String,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantMean {
    pub variant: String,
    pub text_align: f64,
    pub image_align: f64,
    pub rows: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    /// Means over successful rows, per variant in first-seen order.
    pub fn means(&self) -> Vec<VariantMean> {
        let mut out: Vec<VariantMean> = Vec::new();
        for r in &self.rows {
            let i = match out.iter().position(|m| m.variant == r.variant) {
                Some(i) => i,
                None => {
                    out.push(VariantMean {
                        variant: r.variant.clone(),
                        text_align: 0.0,
                        image_align: 0.0,
                        rows: 0,
                        failures: 0,
                    });
                    out.len() - 1
                }
            };
            let m = &mut out[i];
            if r.error.is_some() {
                m.failures += 1;
            } else {
                m.rows += 1;
                m.text_align += r.text_align;
                m.image_align += r.image_align;
            }
        }
        for m in &mut out {
            if m.rows > 0 {
                m.text_align /= m.rows as f64;
                m.image_align /= m.rows as f64;
            }
        }
        out
    }

    pub fn variant_rows<'a>(&'a self, label: &'a str) -> impl Iterator<Item = &'a EvalRow> + 'a {
        self.rows.iter().filter(move |r| r.variant == label)
    }
}

/// Fills a prompt template for a concept. Without the macro class, the
/// class word after the identifier is dropped.
pub fn render_prompt(template: &str, macro_class: &str, keep_class: bool) -> String {
    let filled = if keep_class {
        template.replace("{class}", macro_class)
    } else {
        template.replace(" {class}", "").replace("{class}", "")
    };
    filled.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// The prompt text alignment is scored against: identifier removed,
/// class word present.
fn scoring_prompt(template: &str, macro_class: &str) -> String {
    render_prompt(template, macro_class, true)
        .split_whitespace()
        .filter(|w| *w != CONCEPT_TOKEN)
        .collect::<Vec<_>>()
        .join(" ")
}

fn failed_row(concept: &str, prompt: &str, variant: &Variant, seed: u64, err: &Error) -> EvalRow {
    EvalRow {
        concept: concept.into(),
        prompt: prompt.into(),
        variant: variant.label.clone(),
        seed,
        text_align: f64::NAN,
        image_align: f64::NAN,
        runtime_ms: 0,
        config_hash: variant.config.config_hash(),
        zt_hash: String::new(),
        error: Some(err.to_string()),
    }
}

struct Job<'a> {
    variant: &'a Variant,
    concept: &'a ConceptInput,
}

fn run_job(
    job: &Job<'_>,
    plan: &AblationPlan,
    base: &UNetWeights,
    vocab: &Vocabulary,
    probe: &Probe,
) -> Vec<EvalRow> {
    let (v, c) = (job.variant, job.concept);
    let keep_class = v.config.use_macro_class || v.kind == VariantKind::Base;
    let prompts: Vec<String> = plan
        .prompts
        .iter()
        .map(|t| render_prompt(t, &c.macro_class, keep_class))
        .collect();
    let all_failed = |e: &Error| -> Vec<EvalRow> {
        warn!("event=variant_failed variant={} concept={} error={e}", v.label, c.id);
        prompts
            .iter()
            .flat_map(|p| plan.seeds.iter().map(move |&s| failed_row(&c.id, p, v, s, e)))
            .collect()
    };
    let trained: Result<(Option<ResidualSet>, Vocabulary)> = (|| {
        let out = personalize(base, vocab, &c.references, &c.macro_class, &c.regularization, &v.config, plan.train_seed)?;
        Ok(match v.kind {
            VariantKind::Trained => (Some(out.residuals), out.vocab),
            VariantKind::ZeroResidual => (Some(out.residuals.zeroed()), out.vocab),
            VariantKind::Base => (None, out.vocab),
        })
    })();
    let (residuals, concept_vocab) = match trained {
        Ok(x) => x,
        Err(e) => return all_failed(&e),
    };
    let mut rows = Vec::new();
    for (template, prompt) in plan.prompts.iter().zip(&prompts) {
        for &seed in &plan.seeds {
            let req = SampleRequest {
                prompt: prompt.clone(),
                seed,
                steps: plan.sampling.steps,
                guidance: plan.sampling.guidance,
                lag: plan.sampling.lag && residuals.is_some(),
                ..SampleRequest::default()
            };
            let started = Instant::now();
            let row = (|| {
                let out = sample(&req, base, &concept_vocab, residuals.as_ref(), None)?;
                let runtime_ms = started.elapsed().as_millis() as u64;
                let score_vocab = vocab_for(&concept_vocab, residuals.as_ref())?;
                Ok(EvalRow {
                    concept: c.id.clone(),
                    prompt: prompt.clone(),
                    variant: v.label.clone(),
                    seed,
                    text_align: toy_text_alignment(
                        &out.image,
                        &scoring_prompt(template, &c.macro_class),
                        &score_vocab,
                        probe,
                    )?,
                    image_align: toy_image_alignment(&out.image, &c.references)?,
                    runtime_ms,
                    config_hash: v.config.config_hash(),
                    zt_hash: out.zt_hash,
                    error: None,
                })
            })();
            rows.push(row.unwrap_or_else(|e: Error| {
                warn!("event=row_failed variant={} concept={} seed={seed} error={e}", v.label, c.id);
                failed_row(&c.id, prompt, v, seed, &e)
            }));
        }
    }
    rows
}

/// Personalizes every (variant, concept) pair and scores samples for each
/// (prompt, seed). Failures become marked rows; the sweep continues.
/// Rows are ordered by variant, concept, prompt, seed regardless of `threads`.
pub fn run_ablations(
    plan: &AblationPlan,
    base: &UNetWeights,
    vocab: &Vocabulary,
    concepts: &[ConceptInput],
    probe: &Probe,
    threads: usize,
) -> Result<EvalReport> {
    plan.validate()?;
    if concepts.is_empty() {
        return Err(Error::Input("no concepts to evaluate".into()));
    }
    let jobs: Vec<Job<'_>> = plan
        .variants
        .iter()
        .flat_map(|variant| concepts.iter().map(move |concept| Job { variant, concept }))
        .collect();
    let results: Vec<Mutex<Vec<EvalRow>>> = jobs.iter().map(|_| Mutex::new(Vec::new())).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, jobs.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let rows = run_job(&jobs[i], plan, base, vocab, probe);
                *results[i].lock().expect("unpoisoned") = rows;
            });
        }
    });
    let rows = results
        .into_iter()
        .flat_map(|m| m.into_inner().expect("unpoisoned"))
        .collect();
    Ok(EvalReport { rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl ReportFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => ReportFormat::Json,
            _ => ReportFormat::Csv,
        }
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn fmt6(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        String::new()
    }
}

pub fn report_csv(report: &EvalReport) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in &report.rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            csv_field(&r.concept),
            csv_field(&r.prompt),
            csv_field(&r.variant),
            r.seed,
            fmt6(r.text_align),
            fmt6(r.image_align),
            r.runtime_ms,
            r.config_hash
        )
        .expect("writing to a String");
    }
    out
}

#[derive(Serialize, Deserialize)]
struct JsonReport {
    rows: Vec<JsonRow>,
    means: Vec<VariantMean>,
}

#[derive(Serialize, Deserialize)]
struct JsonRow {
    concept: String,
    prompt: String,
    variant: String,
    seed: u64,
    text_align: Option<f64>,
    image_align: Option<f64>,
    runtime_ms: u64,
    config_hash: String,
    zt_hash: String,
    error: Option<String>,
}

fn round6(v: f64) -> Option<f64> {
    v.is_finite().then(|| (v * 1e6).round() / 1e6)
}

pub fn report_json(report: &EvalReport) -> Result<String> {
    let rows = report
        .rows
        .iter()
        .map(|r| JsonRow {
            concept: r.concept.clone(),
            prompt: r.prompt.clone(),
            variant: r.variant.clone(),
            seed: r.seed,
            text_align: round6(r.text_align),
            image_align: round6(r.image_align),
            runtime_ms: r.runtime_ms,
            config_hash: r.config_hash.clone(),
            zt_hash: r.zt_hash.clone(),
            error: r.error.clone(),
        })
        .collect();
    let means = report
        .means()
        .into_iter()
        .map(|m| VariantMean {
            text_align: round6(m.text_align).unwrap_or(0.0),
            image_align: round6(m.image_align).unwrap_or(0.0),
            ..m
        })
        .collect();
    Ok(serde_json::to_string_pretty(&JsonReport { rows, means })?)
}

/// Parses a report written by [`emit_report`] in JSON form.
pub fn parse_report_json(text: &str) -> Result<EvalReport> {
    let parsed: JsonReport = serde_json::from_str(text)?;
    Ok(EvalReport {
        rows: parsed
            .rows
            .into_iter()
            .map(|r| EvalRow {
                concept: r.concept,
                prompt: r.prompt,
                variant: r.variant,
                seed: r.seed,
                text_align: r.text_align.unwrap_or(f64::NAN),
                image_align: r.image_align.unwrap_or(f64::NAN),
                runtime_ms: r.runtime_ms,
                config_hash: r.config_hash,
                zt_hash: r.zt_hash,
                error: r.error,
            })
            .collect(),
    })
}

pub fn emit_report(report: &EvalReport, path: &Path, format: ReportFormat) -> Result<()> {
    if report.rows.is_empty() {
        return Err(Error::Input("refusing to write an empty report".into()));
    }
    let text = match format {
        ReportFormat::Csv => report_csv(report),
        ReportFormat::Json => report_json(report)?,
    };
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
