//! Personalized low-rank residuals: rank rule, factor sets, application to
//! frozen weights, training and serialization.

mod io;
mod personalize;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::net::{ArchConfig, UNetWeights};
use crate::rng;
use crate::tensor::Tensor;

pub use io::{load_residuals, save_residuals, RESIDUAL_MAGIC};
pub use personalize::{
    concept_prompt, eval_reference_loss, personalize, trainable_groups, update_probe, BatchComposition, GroupChange,
    PersonalizeOutput, MAX_REFERENCES, PROBES_PER_REFERENCE,
};

pub const DEFAULT_RANK_FRACTION: f64 = 0.05;
pub const FACTOR_INIT_STD: f64 = 0.02;
/// Regularization images per batch when enabled (1 of 4, i.e. 1:3 reg:reference).
pub const REG_IMAGES_PER_BATCH: usize = 1;

/// `max(1, round_half_even(fraction·m))`.
pub fn rank_for_fraction(m: usize, fraction: f64) -> usize {
    // Snap values within 1e-9 of a tie so 0.05·m behaves like m/20.
    let x = ((m as f64 * fraction) * 1e9).round() / 1e9;
    (x.round_ties_even() as usize).max(1)
}

/// The default rank rule, r = 0.05·m.
pub fn rank_for(m: usize) -> usize {
    rank_for_fraction(m, DEFAULT_RANK_FRACTION)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankRule {
    Fraction(f64),
    Fixed(usize),
}

impl Default for RankRule {
    fn default() -> Self {
        RankRule::Fraction(DEFAULT_RANK_FRACTION)
    }
}

impl RankRule {
    pub fn rank(&self, dim: usize) -> usize {
        match *self {
            RankRule::Fraction(f) => rank_for_fraction(dim, f),
            RankRule::Fixed(r) => r,
        }
    }

    pub fn label(&self) -> String {
        match *self {
            RankRule::Fraction(f) => format!("{f}m"),
            RankRule::Fixed(r) => r.to_string(),
        }
    }
}

/// Layer inside a transformer block that can carry a residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetLayer {
    ProjOut,
    ProjIn,
    Key,
    Value,
}

impl TargetLayer {
    pub fn name(self) -> &'static str {
        match self {
            TargetLayer::ProjOut => "proj_out",
            TargetLayer::ProjIn => "proj_in",
            TargetLayer::Key => "key",
            TargetLayer::Value => "value",
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            TargetLayer::ProjOut => 0,
            TargetLayer::ProjIn => 1,
            TargetLayer::Key => 2,
            TargetLayer::Value => 3,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Result<Self> {
        Ok(match tag {
            0 => TargetLayer::ProjOut,
            1 => TargetLayer::ProjIn,
            2 => TargetLayer::Key,
            3 => TargetLayer::Value,
            t => return Err(Error::Format(format!("unknown residual target tag {t}"))),
        })
    }

    /// `(rows, cols)` of the weight this target offsets.
    pub fn dims(self, m: usize, arch: &ArchConfig) -> (usize, usize) {
        match self {
            TargetLayer::ProjOut | TargetLayer::ProjIn => (m, m),
            TargetLayer::Key | TargetLayer::Value => (arch.d_txt, arch.inner()),
        }
    }
}

/// Which layers receive residuals; one selector per configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TargetSelector {
    #[default]
    ProjOut,
    Kv,
    ProjIn,
    KvProjOut,
    KvProjInProjOut,
}

impl TargetSelector {
    pub fn layers(self) -> &'static [TargetLayer] {
        use TargetLayer::*;
        match self {
            TargetSelector::ProjOut => &[ProjOut],
            TargetSelector::Kv => &[Key, Value],
            TargetSelector::ProjIn => &[ProjIn],
            TargetSelector::KvProjOut => &[Key, Value, ProjOut],
            TargetSelector::KvProjInProjOut => &[Key, Value, ProjIn, ProjOut],
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s.replace('-', "_").as_str() {
            "proj_out" => TargetSelector::ProjOut,
            "kv" => TargetSelector::Kv,
            "proj_in" => TargetSelector::ProjIn,
            "kv+proj_out" | "kv_proj_out" => TargetSelector::KvProjOut,
            "kv+proj_in+proj_out" | "kv_proj_in_proj_out" => TargetSelector::KvProjInProjOut,
            other => return Err(Error::Config(format!("unknown target selector {other:?}"))),
        })
    }
}

/// Training configuration for one concept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PersonalizeConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub target: TargetSelector,
    pub use_macro_class: bool,
    pub use_reg_images: bool,
    pub update_token_embedding: bool,
    pub rank: RankRule,
}

impl Default for PersonalizeConfig {
    fn default() -> Self {
        Self {
            iterations: 150,
            batch_size: 4,
            learning_rate: 1e-3,
            target: TargetSelector::ProjOut,
            use_macro_class: true,
            use_reg_images: false,
            update_token_embedding: false,
            rank: RankRule::default(),
        }
    }
}

impl PersonalizeConfig {
    /// Short stable digest of every field plus the regularization ratio.
    pub fn config_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("config serializes"));
        h.update((REG_IMAGES_PER_BATCH as u64).to_le_bytes());
        crate::net::hex(&h.finalize())[..16].to_string()
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::Config("iterations and batch size must be positive".into()));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.use_reg_images && self.batch_size <= REG_IMAGES_PER_BATCH {
            return Err(Error::Config("batch too small to mix in regularization images".into()));
        }
        match self.rank {
            RankRule::Fraction(f) if f.is_nan() || f <= 0.0 => Err(Error::Config(format!("rank fraction {f} must be positive"))),
            RankRule::Fixed(0) => Err(Error::Config("fixed rank must be at least 1".into())),
            _ => Ok(()),
        }
    }
}

/// A low-rank offset `ΔW = A·B`.
#[derive(Debug, Clone)]
pub struct LowRank {
    pub a: Tensor,
    pub b: Tensor,
}

impl LowRank {
    pub fn rank(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.a.numel() + self.b.numel()
    }

    /// `A·B` as a dense `[rows × cols]` matrix.
    pub fn delta(&self) -> Result<Tensor> {
        self.a.matmul(&self.b)
    }
}

#[derive(Debug, Clone, Default)]
pub struct BlockResidual {
    pub proj_out: Option<LowRank>,
    pub proj_in: Option<LowRank>,
    pub key: Option<LowRank>,
    pub value: Option<LowRank>,
}

impl BlockResidual {
    pub fn get(&self, layer: TargetLayer) -> Option<&LowRank> {
        match layer {
            TargetLayer::ProjOut => self.proj_out.as_ref(),
            TargetLayer::ProjIn => self.proj_in.as_ref(),
            TargetLayer::Key => self.key.as_ref(),
            TargetLayer::Value => self.value.as_ref(),
        }
    }

    fn slot(&mut self, layer: TargetLayer) -> &mut Option<LowRank> {
        match layer {
            TargetLayer::ProjOut => &mut self.proj_out,
            TargetLayer::ProjIn => &mut self.proj_in,
            TargetLayer::Key => &mut self.key,
            TargetLayer::Value => &mut self.value,
        }
    }

    pub fn entries(&self) -> Vec<(TargetLayer, &LowRank)> {
        [TargetLayer::ProjOut, TargetLayer::ProjIn, TargetLayer::Key, TargetLayer::Value]
            .into_iter()
            .filter_map(|l| self.get(l).map(|f| (l, f)))
            .collect()
    }

    /// Base weight with this block's residual for `layer` added, if any.
    pub fn effective(&self, layer: TargetLayer, base: &Tensor) -> Result<Tensor> {
        match self.get(layer) {
            Some(f) => apply_residual(base, &f.a, &f.b),
            None => Ok(base.clone()),
        }
    }

    pub fn has_only_proj_out(&self) -> bool {
        self.proj_in.is_none() && self.key.is_none() && self.value.is_none()
    }
}

/// Identity of the concept a residual set encodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptMeta {
    pub concept_token: u32,
    pub macro_class: Option<String>,
    pub config_hash: String,
    pub target: TargetSelector,
    pub param_count: usize,
}

/// Per-block low-rank factors for one personalized concept.
#[derive(Debug, Clone)]
pub struct ResidualSet {
    pub meta: ConceptMeta,
    pub blocks: Vec<BlockResidual>,
    /// Trained identifier embedding, present only when the token embedding
    /// was unfrozen.
    pub token_embedding: Option<Tensor>,
}

impl ResidualSet {
    pub fn param_count(&self) -> usize {
        self.blocks
            .iter()
            .flat_map(|b| b.entries())
            .map(|(_, f)| f.param_count())
            .sum()
    }

    pub fn ranks(&self, layer: TargetLayer) -> Vec<Option<usize>> {
        self.blocks.iter().map(|b| b.get(layer).map(LowRank::rank)).collect()
    }

    /// A copy with every factor set to zero.
    pub fn zeroed(&self) -> Self {
        let mut out = self.clone();
        for f in out.factors_mut() {
            *f = Tensor::zeros(f.shape());
        }
        out
    }

    pub fn is_proj_out_only(&self) -> bool {
        self.blocks.iter().all(BlockResidual::has_only_proj_out)
    }

    pub(crate) fn factors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            for f in [&mut b.proj_out, &mut b.proj_in, &mut b.key, &mut b.value].into_iter().flatten() {
                out.push(&mut f.a);
                out.push(&mut f.b);
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.blocks
            .iter()
            .flat_map(|b| b.entries())
            .all(|(_, f)| f.a.is_finite() && f.b.is_finite())
    }
}

/// `W' = W + reshape(A·B)`, for conv kernels `[m×m×1]` or plain matrices.
pub fn apply_residual(w: &Tensor, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (rows, cols) = match w.shape() {
        [r, c, 1] | [r, c] => (*r, *c),
        s => return Err(Error::dim("apply_residual", s, a.shape())),
    };
    match (a.shape(), b.shape()) {
        ([ar, r1], [r2, bc]) if *ar == rows && r1 == r2 && *bc == cols => {}
        _ => return Err(Error::dim("apply_residual", a.shape(), b.shape())),
    }
    w.add(&a.matmul(b)?.reshape(w.shape())?)
}

/// Random factors `A, B ~ N(0, 0.02²)` for every selected layer of every block.
pub fn init_residuals(w: &UNetWeights, cfg: &PersonalizeConfig, seed: u64) -> Result<ResidualSet> {
    cfg.validate()?;
    let arch = &w.config;
    let mut stream = rng::stream(seed, "residual-init", 0);
    let mut blocks = Vec::with_capacity(arch.num_blocks());
    for &m in &arch.widths {
        let mut block = BlockResidual::default();
        for &layer in cfg.target.layers() {
            let (rows, cols) = layer.dims(m, arch);
            // Rank follows the layer's output dimension.
            let r = cfg.rank.rank(cols);
            if r > rows.min(cols) {
                return Err(Error::Config(format!(
                    "rank {r} exceeds the {rows}×{cols} weight of {layer:?} (m = {m})"
                )));
            }
            *block.slot(layer) = Some(LowRank {
                a: Tensor::randn(&[rows, r], FACTOR_INIT_STD, &mut stream),
                b: Tensor::randn(&[r, cols], FACTOR_INIT_STD, &mut stream),
            });
        }
        blocks.push(block);
    }
    let mut set = ResidualSet {
        meta: ConceptMeta {
            concept_token: 0,
            macro_class: None,
            config_hash: cfg.config_hash(),
            target: cfg.target,
            param_count: 0,
        },
        blocks,
        token_embedding: None,
    };
    set.meta.param_count = set.param_count();
    Ok(set)
}

/// Residual vs. base parameter census.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub residual_params: usize,
    pub base_params: usize,
    pub ratio: f64,
}

pub fn param_report(rs: &ResidualSet, base: &UNetWeights) -> ParamReport {
    let residual_params = rs.param_count();
    let base_params = base.param_count();
    ParamReport {
        residual_params,
        base_params,
        ratio: residual_params as f64 / base_params as f64,
    }
}
