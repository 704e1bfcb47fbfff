use crate::error::{Error, Result};
use crate::net::BlockWeights;
use crate::tensor::Tensor;
use crate::text::Conditioning;

/// Cross-attention probabilities of one block, laid out `[head][position][token]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossMaps {
    pub heads: usize,
    pub height: usize,
    pub width: usize,
    pub seq: usize,
    pub data: Vec<f64>,
}

impl CrossMaps {
    pub fn at(&self, head: usize, pos: usize, token: usize) -> f64 {
        self.data[(head * self.height * self.width + pos) * self.seq + token]
    }

    /// Row of head `head` at spatial position `pos` (sums to 1 over valid tokens).
    pub fn row(&self, head: usize, pos: usize) -> &[f64] {
        let start = (head * self.height * self.width + pos) * self.seq;
        &self.data[start..start + self.seq]
    }
}

/// Multi-head attention of queries `x [n×m]` over `context [s×d_c]`.
///
/// Returns the projected output `[n×m]` and the per-head probabilities.
#[allow(clippy::too_many_arguments)]
pub fn attention(
    x: &Tensor,
    context: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    wo: &Tensor,
    wo_b: &Tensor,
    heads: usize,
    valid: Option<&[bool]>,
) -> Result<(Tensor, Vec<Tensor>)> {
    let inner = wq.shape().get(1).copied().unwrap_or(0);
    if heads == 0 || inner % heads != 0 {
        return Err(Error::Config(format!("{inner} inner channels over {heads} heads")));
    }
    let d = inner / heads;
    let q = x.matmul(wq)?;
    let k = context.matmul(wk)?;
    let v = context.matmul(wv)?;
    let scale = 1.0 / (d as f64).sqrt();
    let mut out: Option<Tensor> = None;
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (a, b) = (h * d, (h + 1) * d);
        let qh = q.slice_cols(a, b)?;
        let kh = k.slice_cols(a, b)?;
        let vh = v.slice_cols(a, b)?;
        let p = qh.matmul(&kh.transpose()?)?.scale(scale).softmax_rows_masked(valid)?;
        let proj = p.matmul(&vh)?.matmul(&wo.slice_rows(a, b)?)?;
        out = Some(match out {
            Some(o) => o.add(&proj)?,
            None => proj,
        });
        probs.push(p);
    }
    let out = out.expect("at least one head").add_row_vec(wo_b)?;
    Ok((out, probs))
}

pub(crate) fn pack_maps(probs: &[Tensor], height: usize, width: usize) -> CrossMaps {
    let seq = probs.first().map_or(0, |p| p.shape()[1]);
    let mut data = Vec::with_capacity(probs.len() * height * width * seq);
    for p in probs {
        data.extend_from_slice(p.data());
    }
    CrossMaps {
        heads: probs.len(),
        height,
        width,
        seq,
        data,
    }
}

/// Block cross-attention on feature map `x [m×h×w]` with the block's own
/// weights. Returns the `[m×h×w]` output and the attention maps.
pub fn cross_attention(x: &Tensor, cond: &Conditioning, bw: &BlockWeights, heads: usize) -> Result<(Tensor, CrossMaps)> {
    let (m, h, w) = match x.shape() {
        [m, h, w] => (*m, *h, *w),
        s => return Err(Error::dim("cross_attention", s, &[bw.width])),
    };
    let tokens = x.reshape(&[m, h * w])?.transpose()?;
    let (out, probs) = attention(
        &tokens,
        &cond.emb,
        &bw.cross_q,
        &bw.cross_k,
        &bw.cross_v,
        &bw.cross_o,
        &bw.cross_o_b,
        heads,
        Some(&cond.valid),
    )?;
    Ok((out.transpose()?.reshape(&[m, h, w])?, pack_maps(&probs, h, w)))
}
