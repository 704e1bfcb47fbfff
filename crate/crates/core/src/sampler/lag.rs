//! Localized attention guidance: concept-token attention → binary mask →
//! per-block blend of base and personalized proj_out features.

use std::sync::Arc;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::CrossMaps;
use crate::tensor::Tensor;

/// How per-head attention is turned into one mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskRule {
    /// Mean over heads, sum over concept tokens, then one median cut.
    #[default]
    AggregateThenBinarize,
    /// Median cut per head on its concept-token sum; union of the head masks.
    PerHeadUnion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    Computed,
    Injected,
}

/// A binary mask at a block's native resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockMask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<u8>,
    /// The source map was constant, so the all-ones fallback was used.
    pub degenerate: bool,
}

impl BlockMask {
    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self {
            height,
            width,
            bits: vec![value; height * width],
            degenerate: false,
        }
    }

    pub fn ones_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    pub fn coverage(&self) -> f64 {
        self.ones_count() as f64 / self.bits.len() as f64
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.bits.iter().map(|&b| f64::from(b)).collect(), &[self.height, self.width])
            .expect("mask shape")
    }
}

/// Where a mask came from and where it was applied.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskRecord {
    pub step: usize,
    pub timestep: usize,
    pub block: usize,
    pub concept_indices: Vec<usize>,
    pub source: MaskSource,
    pub mask: BlockMask,
}

/// Masks applied during one sampling run, indexed by (step, block).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MaskStack {
    pub records: Vec<MaskRecord>,
}

impl MaskStack {
    pub fn get(&self, step: usize, block: usize) -> Option<&BlockMask> {
        self.records
            .iter()
            .find(|r| r.step == step && r.block == block)
            .map(|r| &r.mask)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// A stack holding the same constant mask for every (step, block).
    pub fn constant(steps: usize, sides: &[usize], value: u8) -> Self {
        let mut records = Vec::new();
        for step in 0..steps {
            for (block, &side) in sides.iter().enumerate() {
                records.push(MaskRecord {
                    step,
                    timestep: 0,
                    block,
                    concept_indices: Vec::new(),
                    source: MaskSource::Injected,
                    mask: BlockMask::filled(side, side, value),
                });
            }
        }
        Self { records }
    }
}

/// LAG settings for a sampling run.
#[derive(Debug, Clone, Default)]
pub struct LagConfig {
    pub concept_indices: Vec<usize>,
    pub rule: MaskRule,
    /// Replaces computed masks (replay and limit checks).
    pub injected: Option<Arc<MaskStack>>,
}

/// LAG state handed to a single network evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LagStep<'a> {
    pub config: &'a LagConfig,
    pub step: usize,
    pub timestep: usize,
}

impl LagConfig {
    pub fn validate(&self) -> Result<()> {
        if self.concept_indices.is_empty() && self.injected.is_none() {
            return Err(Error::Config("prompt contains no concept tokens".into()));
        }
        Ok(())
    }

    pub(crate) fn mask_for(&self, step: usize, timestep: usize, block: usize, maps: &CrossMaps) -> Result<MaskRecord> {
        let (mask, source) = match &self.injected {
            Some(stack) => {
                let m = stack.get(step, block).ok_or_else(|| {
                    Error::Config(format!("no injected mask for step {step}, block {block}"))
                })?;
                if (m.height, m.width) != (maps.height, maps.width) {
                    return Err(Error::dim(
                        "injected mask",
                        &[m.height, m.width],
                        &[maps.height, maps.width],
                    ));
                }
                (m.clone(), MaskSource::Injected)
            }
            None => (self.compute(maps)?, MaskSource::Computed),
        };
        if mask.degenerate {
            warn!("event=degenerate_mask step={step} block={block} policy=all_ones");
        }
        Ok(MaskRecord {
            step,
            timestep,
            block,
            concept_indices: self.concept_indices.clone(),
            source,
            mask,
        })
    }

    fn compute(&self, maps: &CrossMaps) -> Result<BlockMask> {
        match self.rule {
            MaskRule::AggregateThenBinarize => {
                let agg = aggregate_concept_maps(maps, &self.concept_indices)?;
                Ok(binarize_median_mask(agg.data(), maps.height, maps.width))
            }
            MaskRule::PerHeadUnion => {
                let n = maps.height * maps.width;
                let mut bits = vec![0u8; n];
                let mut degenerate = true;
                for h in 0..maps.heads {
                    let head = head_concept_sum(maps, h, &self.concept_indices)?;
                    let m = binarize_median_mask(&head, maps.height, maps.width);
                    degenerate &= m.degenerate;
                    for (o, b) in bits.iter_mut().zip(&m.bits) {
                        *o |= b;
                    }
                }
                Ok(BlockMask {
                    height: maps.height,
                    width: maps.width,
                    bits,
                    degenerate,
                })
            }
        }
    }
}

fn check_indices(maps: &CrossMaps, concept: &[usize]) -> Result<()> {
    if concept.is_empty() {
        return Err(Error::Config("empty concept index set".into()));
    }
    if let Some(j) = concept.iter().find(|&&j| j >= maps.seq) {
        return Err(Error::Config(format!("concept index {j} outside sequence of {}", maps.seq)));
    }
    Ok(())
}

fn head_concept_sum(maps: &CrossMaps, head: usize, concept: &[usize]) -> Result<Vec<f64>> {
    check_indices(maps, concept)?;
    let n = maps.height * maps.width;
    Ok((0..n)
        .map(|p| concept.iter().map(|&j| maps.at(head, p, j)).sum())
        .collect())
}

/// `A_{i,𝒞}`: mean over heads, then the sum of the concept-token columns,
/// shaped `[h × w]`.
pub fn aggregate_concept_maps(maps: &CrossMaps, concept: &[usize]) -> Result<Tensor> {
    check_indices(maps, concept)?;
    let n = maps.height * maps.width;
    let heads = maps.heads as f64;
    let out: Vec<f64> = (0..n)
        .map(|p| {
            concept
                .iter()
                .map(|&j| (0..maps.heads).map(|h| maps.at(h, p, j)).sum::<f64>() / heads)
                .sum()
        })
        .collect();
    Tensor::new(out, &[maps.height, maps.width])
}

/// Median of a slice: middle element, or mean of the two middle elements.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn binarize_median_mask(values: &[f64], height: usize, width: usize) -> BlockMask {
    let first = values.first().copied().unwrap_or(0.0);
    if values.iter().all(|&v| v == first) {
        return BlockMask {
            height,
            width,
            bits: vec![1; values.len()],
            degenerate: true,
        };
    }
    let med = median(values);
    BlockMask {
        height,
        width,
        bits: values.iter().map(|&v| u8::from(v > med)).collect(),
        degenerate: false,
    }
}

/// `M = [A > median(A)]`; a constant map yields all ones.
pub fn binarize_median(a: &Tensor) -> Tensor {
    let (h, w) = match a.shape() {
        [h, w] => (*h, *w),
        _ => (1, a.numel()),
    };
    binarize_median_mask(a.data(), h, w)
        .to_tensor()
        .reshape(a.shape())
        .expect("same element count")
}

/// `f̂ = (1−M)⊗f + M⊗f′` with `M[h×w]` broadcast over channels of
/// `f, f′ [m×h×w]`. Binary entries select exactly; the result is untracked.
pub fn blend_features(f: &Tensor, f_prime: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if f.shape() != f_prime.shape() {
        return Err(Error::dim("blend_features", f.shape(), f_prime.shape()));
    }
    let n = mask.numel();
    if n == 0 || !f.numel().is_multiple_of(n) || (f.shape().len() == 3 && f.shape()[1] * f.shape()[2] != n) {
        return Err(Error::dim("blend_features", f.shape(), mask.shape()));
    }
    let md = mask.data();
    let out: Vec<f64> = f
        .data()
        .iter()
        .zip(f_prime.data())
        .enumerate()
        .map(|(i, (&a, &b))| {
            let m = md[i % n];
            if m == 1.0 {
                b
            } else if m == 0.0 {
                a
            } else {
                (1.0 - m) * a + m * b
            }
        })
        .collect();
    Tensor::new(out, f.shape())
}
