//! Toy alignment metrics, macro-class selection and the ablation harness.

mod ablation;
mod metrics;

pub use ablation::{
    emit_report, parse_report_json, render_prompt, report_csv, report_json, run_ablations, AblationPlan,
    ConceptInput, EvalReport, EvalRow, ReportFormat, SweepSampling, Variant, VariantKind, VariantMean, CSV_HEADER,
    DEFAULT_LABEL,
};
pub use metrics::{
    cosine, identity_descriptor, macro_class_nn, nearest_class, prompt_class, silhouette_descriptor, toy_image_alignment,
    toy_text_alignment, Probe, PROBE_BLOCK, PROBE_SPRITES, PROBE_TIMESTEP,
};
