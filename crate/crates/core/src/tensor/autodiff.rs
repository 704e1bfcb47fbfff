use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use super::ops::{gelu_grad, gemm, sigmoid};
use super::{Node, Op, Tensor};
use crate::error::{Error, Result};

/// Gradients of a scalar with respect to every tracked leaf that reached it.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    by_id: HashMap<u64, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        t.id().and_then(|id| self.by_id.get(&id)).map(Vec::as_slice)
    }

    /// Gradient for `t`, zero-filled when `t` did not influence the loss.
    pub fn get_or_zeros(&self, t: &Tensor) -> Vec<f64> {
        self.get(t)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; t.numel()])
    }

    pub fn wrt(&self, t: &Tensor) -> Tensor {
        Tensor::new(self.get_or_zeros(t), t.shape()).expect("gradient shape matches parameter")
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }
}

fn slot<'a>(grads: &'a mut HashMap<u64, Vec<f64>>, t: &Tensor) -> Option<&'a mut Vec<f64>> {
    let id = t.id()?;
    Some(grads.entry(id).or_insert_with(|| vec![0.0; t.numel()]))
}

fn accumulate(grads: &mut HashMap<u64, Vec<f64>>, t: &Tensor, contrib: impl Fn(usize) -> f64) {
    if let Some(g) = slot(grads, t) {
        for (i, v) in g.iter_mut().enumerate() {
            *v += contrib(i);
        }
    }
}

/// Reverse-mode sweep from a scalar `loss`.
///
/// Leaves that the loss does not depend on are absent from the result
/// (reported as zeros by [`Gradients::get_or_zeros`]).
pub fn backward(loss: &Tensor) -> Result<Gradients> {
    if loss.numel() != 1 {
        return Err(Error::Contract(format!(
            "backward needs a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    let Some(root) = loss.node().cloned() else {
        return Ok(Gradients::default());
    };

    let mut seen = HashSet::new();
    let mut order: Vec<Arc<Node>> = Vec::new();
    let mut stack = vec![root.clone()];
    while let Some(node) = stack.pop() {
        if !seen.insert(node.id) {
            continue;
        }
        for p in node.op.parents() {
            if let Some(pn) = p.node() {
                if !seen.contains(&pn.id) {
                    stack.push(pn.clone());
                }
            }
        }
        order.push(node);
    }
    order.sort_by_key(|n| std::cmp::Reverse(n.id));

    let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
    grads.insert(root.id, vec![1.0]);
    let mut leaves = HashMap::new();

    for node in order {
        let Some(g) = grads.remove(&node.id) else {
            continue;
        };
        if matches!(node.op, Op::Leaf) {
            leaves.insert(node.id, g);
            continue;
        }
        propagate(&node.op, &g, &mut grads);
    }
    Ok(Gradients { by_id: leaves })
}

fn propagate(op: &Op, g: &[f64], grads: &mut HashMap<u64, Vec<f64>>) {
    match op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            if let Some(ga) = slot(grads, a) {
                // dA = G·Bᵀ
                gemm(m, n, k, g, (n as isize, 1), b.data(), (1, n as isize), ga, 1.0);
            }
            if let Some(gb) = slot(grads, b) {
                // dB = Aᵀ·G
                gemm(k, m, n, a.data(), (1, k as isize), g, (n as isize, 1), gb, 1.0);
            }
        }
        Op::Add(a, b) => {
            accumulate(grads, a, |i| g[i]);
            accumulate(grads, b, |i| g[i]);
        }
        Op::Sub(a, b) => {
            accumulate(grads, a, |i| g[i]);
            accumulate(grads, b, |i| -g[i]);
        }
        Op::Mul(a, b) => {
            let (ad, bd) = (a.data(), b.data());
            accumulate(grads, a, |i| g[i] * bd[i]);
            accumulate(grads, b, |i| g[i] * ad[i]);
        }
        Op::Scale(a, s) => accumulate(grads, a, |i| g[i] * s),
        Op::AddRowVec(x, v) => {
            accumulate(grads, x, |i| g[i]);
            let c = v.numel();
            if let Some(gv) = slot(grads, v) {
                for row in g.chunks_exact(c) {
                    for (o, r) in gv.iter_mut().zip(row) {
                        *o += r;
                    }
                }
            }
        }
        Op::AddColVec(x, v) => {
            accumulate(grads, x, |i| g[i]);
            let c = x.shape()[1];
            if let Some(gv) = slot(grads, v) {
                for (o, row) in gv.iter_mut().zip(g.chunks_exact(c)) {
                    *o += row.iter().sum::<f64>();
                }
            }
        }
        Op::Reshape(a) => accumulate(grads, a, |i| g[i]),
        Op::Gather(a, index) => {
            if let Some(ga) = slot(grads, a) {
                for (gi, &src) in g.iter().zip(index.iter()) {
                    ga[src] += gi;
                }
            }
        }
        Op::Concat(parts) => {
            let mut offset = 0;
            for p in parts {
                let n = p.numel();
                accumulate(grads, p, |i| g[offset + i]);
                offset += n;
            }
        }
        Op::Softmax(x, y) => {
            let c = x.shape()[1];
            if let Some(gx) = slot(grads, x) {
                for ((gy, yr), gxr) in g.chunks_exact(c).zip(y.chunks_exact(c)).zip(gx.chunks_exact_mut(c)) {
                    let dot: f64 = gy.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gxr[j] += yr[j] * (gy[j] - dot);
                    }
                }
            }
        }
        Op::Gelu(x) => {
            let xd = x.data();
            accumulate(grads, x, |i| g[i] * gelu_grad(xd[i]));
        }
        Op::Silu(x) => {
            let xd = x.data();
            accumulate(grads, x, |i| {
                let s = sigmoid(xd[i]);
                g[i] * s * (1.0 + xd[i] * (1.0 - s))
            });
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let c = x.shape()[1];
            let gam = gamma.data();
            if let Some(gg) = slot(grads, gamma) {
                for (gr, hr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for j in 0..c {
                        gg[j] += gr[j] * hr[j];
                    }
                }
            }
            if let Some(gb) = slot(grads, beta) {
                for gr in g.chunks_exact(c) {
                    for j in 0..c {
                        gb[j] += gr[j];
                    }
                }
            }
            if let Some(gx) = slot(grads, x) {
                let cf = c as f64;
                for (i, ((gr, hr), gxr)) in g
                    .chunks_exact(c)
                    .zip(xhat.chunks_exact(c))
                    .zip(gx.chunks_exact_mut(c))
                    .enumerate()
                {
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..c {
                        let dh = gr[j] * gam[j];
                        s1 += dh;
                        s2 += dh * hr[j];
                    }
                    let inv = inv_std[i];
                    for j in 0..c {
                        let dh = gr[j] * gam[j];
                        gxr[j] += inv / cf * (cf * dh - s1 - hr[j] * s2);
                    }
                }
            }
        }
        Op::Sum(a) => accumulate(grads, a, |_| g[0]),
        Op::Square(a) => {
            let ad = a.data();
            accumulate(grads, a, |i| 2.0 * ad[i] * g[i]);
        }
    }
}
