use std::sync::Arc;

use crate::error::{Error, Result};
use crate::net::attention::{attention, pack_maps, CrossMaps};
use crate::net::{ArchConfig, BlockWeights, UNetWeights, TRAIN_STEPS};
use crate::residuals::{BlockResidual, ResidualSet, TargetLayer};
use crate::sampler::{blend_features, LagStep, MaskRecord};
use crate::tensor::Tensor;
use crate::text::Conditioning;

const LN_EPS: f64 = 1e-5;

/// Cross-attention maps of every block from one forward pass.
#[derive(Debug, Clone, Default)]
pub struct AttentionStack {
    pub blocks: Vec<CrossMaps>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub eps: Tensor,
    pub attn: AttentionStack,
    /// Masks applied under LAG, one per block.
    pub masks: Vec<MaskRecord>,
    /// Output of each transformer block, `[m×h×w]`.
    pub features: Vec<Tensor>,
}

/// Sinusoidal timestep code of even length `dim`, shape `[1×dim]`.
pub fn timestep_embedding(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; half * 2];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        let a = t as f64 * freq;
        out[i] = a.sin();
        out[half + i] = a.cos();
    }
    Tensor::new(out, &[1, half * 2]).expect("shape")
}

fn s2d_index(c: usize, h: usize, w: usize) -> Vec<usize> {
    let (h2, w2) = (h / 2, w / 2);
    let mut idx = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for dy in 0..2 {
            for dx in 0..2 {
                for y in 0..h2 {
                    for x in 0..w2 {
                        idx.push(ch * h * w + (2 * y + dy) * w + 2 * x + dx);
                    }
                }
            }
        }
    }
    idx
}

/// `[c×h×w]` → `[4c×h/2×w/2]`; output channel `4c + 2dy + dx`.
pub fn space_to_depth(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = match x.shape() {
        [c, h, w] if h % 2 == 0 && w % 2 == 0 => (*c, *h, *w),
        s => return Err(Error::dim("space_to_depth", s, &[2, 2])),
    };
    x.gather(Arc::new(s2d_index(c, h, w)), &[4 * c, h / 2, w / 2])
}

/// Inverse of [`space_to_depth`]: `[4c×h×w]` → `[c×2h×2w]`.
pub fn depth_to_space(x: &Tensor) -> Result<Tensor> {
    let (c4, h, w) = match x.shape() {
        [c, h, w] if c % 4 == 0 => (*c, *h, *w),
        s => return Err(Error::dim("depth_to_space", s, &[4])),
    };
    let c = c4 / 4;
    let fwd = s2d_index(c, 2 * h, 2 * w);
    let mut inv = vec![0; fwd.len()];
    for (o, &i) in fwd.iter().enumerate() {
        inv[i] = o;
    }
    x.gather(Arc::new(inv), &[c, 2 * h, 2 * w])
}

fn conv_bias(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let y = x.conv1x1(w)?;
    let s = y.shape().to_vec();
    y.reshape(&[s[0], s[1] * s[2]])?.add_col_vec(b)?.reshape(&s)
}

fn conv3_bias(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let y = x.conv3x3(w)?;
    let s = y.shape().to_vec();
    y.reshape(&[s[0], s[1] * s[2]])?.add_col_vec(b)?.reshape(&s)
}

fn ln_channels(x2: &Tensor, g: &Tensor, b: &Tensor) -> Result<Tensor> {
    x2.transpose()?.layer_norm_rows(g, b, LN_EPS)
}

fn effective(res: Option<&BlockResidual>, layer: TargetLayer, base: &Tensor) -> Result<Tensor> {
    match res {
        Some(r) => r.effective(layer, base),
        None => Ok(base.clone()),
    }
}

struct BlockOut {
    out: Tensor,
    maps: CrossMaps,
    mask: Option<MaskRecord>,
}

#[allow(clippy::too_many_arguments)]
fn block_forward(
    index: usize,
    x: &Tensor,
    temb: &Tensor,
    cond: &Conditioning,
    bw: &BlockWeights,
    arch: &ArchConfig,
    res: Option<&BlockResidual>,
    lag: Option<LagStep<'_>>,
) -> Result<BlockOut> {
    let (m, h, w) = match x.shape() {
        [m, h, w] if *m == bw.width => (*m, *h, *w),
        s => return Err(Error::dim("block input", s, &[bw.width])),
    };
    let n = h * w;
    let x2 = x.reshape(&[m, n])?;
    let tb = temb.matmul(&bw.temb_w)?.add_row_vec(&bw.temb_b)?.reshape(&[m])?;
    let normed = ln_channels(&x2.add_col_vec(&tb)?, &bw.norm_in_g, &bw.norm_in_b)?;
    let w_in = effective(res, TargetLayer::ProjIn, &bw.proj_in)?;
    let mut tok = conv_bias(&normed.transpose()?.reshape(&[m, h, w])?, &w_in, &bw.proj_in_b)?
        .reshape(&[m, n])?
        .transpose()?;

    let a = tok.layer_norm_rows(&bw.norm1_g, &bw.norm1_b, LN_EPS)?;
    let (sa, _) = attention(&a, &a, &bw.self_q, &bw.self_k, &bw.self_v, &bw.self_o, &bw.self_o_b, arch.heads, None)?;
    tok = tok.add(&sa)?;

    let c = tok.layer_norm_rows(&bw.norm2_g, &bw.norm2_b, LN_EPS)?;
    let wk = effective(res, TargetLayer::Key, &bw.cross_k)?;
    let wv = effective(res, TargetLayer::Value, &bw.cross_v)?;
    let (ca, probs) = attention(
        &c,
        &cond.emb,
        &bw.cross_q,
        &wk,
        &wv,
        &bw.cross_o,
        &bw.cross_o_b,
        arch.heads,
        Some(&cond.valid),
    )?;
    tok = tok.add(&ca)?;
    let maps = pack_maps(&probs, h, w);

    let f = tok
        .layer_norm_rows(&bw.norm3_g, &bw.norm3_b, LN_EPS)?
        .matmul(&bw.ff_w1)?
        .add_row_vec(&bw.ff_b1)?
        .gelu()
        .matmul(&bw.ff_w2)?
        .add_row_vec(&bw.ff_b2)?;
    tok = tok.add(&f)?;

    let g = tok.transpose()?.reshape(&[m, h, w])?;
    let personal = res.and_then(|r| r.proj_out.as_ref());
    let (f_hat, mask) = match (lag, personal) {
        (Some(step), Some(factors)) => {
            let record = step.config.mask_for(step.step, step.timestep, index, &maps)?;
            let f = conv_bias(&g, &bw.proj_out, &bw.proj_out_b)?;
            let w_p = crate::residuals::apply_residual(&bw.proj_out, &factors.a, &factors.b)?;
            let f_p = conv_bias(&g, &w_p, &bw.proj_out_b)?;
            (blend_features(&f, &f_p, &record.mask.to_tensor())?, Some(record))
        }
        _ => {
            let w_out = effective(res, TargetLayer::ProjOut, &bw.proj_out)?;
            (conv_bias(&g, &w_out, &bw.proj_out_b)?, None)
        }
    };
    Ok(BlockOut {
        out: x.add(&f_hat)?,
        maps,
        mask,
    })
}

/// One evaluation of ε_θ(z_t, t, c).
///
/// With `residuals`, every targeted layer uses `W + A·B`. With `lag`, the
/// proj_out output of each block is blended between base and personalized
/// weights under the block's concept mask; the other layers stay at base.
pub fn unet_forward(
    z_t: &Tensor,
    t: usize,
    cond: &Conditioning,
    w: &UNetWeights,
    residuals: Option<&ResidualSet>,
    lag: Option<LagStep<'_>>,
) -> Result<ForwardOutput> {
    let arch = &w.config;
    let side = arch.image_size;
    if z_t.shape() != [arch.channels, side, side] {
        return Err(Error::Input(format!(
            "latent of shape {:?} does not match the model's {}×{side}×{side}",
            z_t.shape(),
            arch.channels
        )));
    }
    if cond.emb.shape().get(1) != Some(&arch.d_txt) {
        return Err(Error::dim("conditioning", cond.emb.shape(), &[arch.d_txt]));
    }
    if let Some(rs) = residuals {
        if rs.blocks.len() != arch.num_blocks() {
            return Err(Error::Config(format!(
                "residual set has {} blocks, model has {}",
                rs.blocks.len(),
                arch.num_blocks()
            )));
        }
    }
    if let Some(step) = lag {
        match residuals {
            Some(rs) if rs.is_proj_out_only() => {}
            Some(_) => return Err(Error::Config("LAG requires residuals on proj_out only".into())),
            None => return Err(Error::Config("LAG requires a residual set".into())),
        }
        step.config.validate()?;
    }
    if t >= TRAIN_STEPS {
        return Err(Error::Input(format!("timestep {t} outside 0..{TRAIN_STEPS}")));
    }
    let block_res = |i: usize| residuals.map(|r| &r.blocks[i]);
    let tr = &w.trunk;

    let temb = timestep_embedding(t, tr.time_w1.shape()[0])
        .matmul(&tr.time_w1)?
        .add_row_vec(&tr.time_b1)?
        .silu()
        .matmul(&tr.time_w2)?
        .add_row_vec(&tr.time_b2)?
        .silu();

    let (w0, w1) = (arch.widths[0], arch.widths[1]);
    let (s0, s1) = (arch.block_side(0), arch.block_side(1));
    let stem = conv3_bias(&space_to_depth(z_t)?, &tr.stem, &tr.stem_b)?
        .reshape(&[w0, s0 * s0])?
        .add(&tr.pos0)?
        .reshape(&[w0, s0, s0])?;

    let mut attn = AttentionStack::default();
    let mut masks = Vec::new();
    let mut features = Vec::with_capacity(4);
    let mut run = |i: usize, x: &Tensor| -> Result<Tensor> {
        let b = block_forward(i, x, &temb, cond, &w.blocks[i], arch, block_res(i), lag)?;
        attn.blocks.push(b.maps);
        masks.extend(b.mask);
        features.push(b.out.clone());
        Ok(b.out)
    };

    let h0 = run(0, &stem)?;
    let down = conv_bias(&space_to_depth(&h0)?, &tr.down, &tr.down_b)?
        .reshape(&[w1, s1 * s1])?
        .add(&tr.pos1)?
        .reshape(&[w1, s1, s1])?;
    let h1 = run(1, &down)?;
    let h2 = run(2, &h1)?;
    let up = depth_to_space(&conv_bias(&h2, &tr.up, &tr.up_b)?)?.add(&h0)?;
    let h3 = run(3, &up)?;

    let head_in = ln_channels(&h3.reshape(&[w0, s0 * s0])?, &tr.head_norm_g, &tr.head_norm_b)?
        .silu()
        .transpose()?
        .reshape(&[w0, s0, s0])?;
    let (c, side) = (arch.channels, arch.image_size);
    let k = tr.refine.shape()[0];
    let up_head = depth_to_space(&conv3_bias(&head_in, &tr.head, &tr.head_b)?)?.silu();
    let joint = Tensor::concat_rows(&[up_head.reshape(&[k, side * side])?, z_t.reshape(&[c, side * side])?])?
        .reshape(&[k + c, side, side])?;
    let refined = conv3_bias(&joint, &tr.refine, &tr.refine_b)?.silu();
    let eps = conv_bias(&refined, &tr.out, &tr.out_b)?;
    Ok(ForwardOutput {
        eps,
        attn,
        masks,
        features,
    })
}
