use std::sync::Arc;

use super::{Op, Tensor};
use crate::error::{Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `c = alpha * a·b + beta * c` over strided views. Dimensions are
/// `a: m×k`, `b: k×n`, `c: m×n` (row-major, contiguous).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass slices whose extents cover the strided views, and
    // `c` is an exclusive, contiguous m×n buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn tracked(ts: &[&Tensor]) -> bool {
    ts.iter().any(|t| t.requires_grad())
}

impl Tensor {
    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::dim(op, s, &[0, 0])),
        }
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dim(op, self.shape(), other.shape()));
        }
        Ok(())
    }

    /// Matrix product of `[m×k]` and `[k×n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(), other.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.data(),
            (k as isize, 1),
            other.data(),
            (n as isize, 1),
            &mut out,
            0.0,
        );
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            || Op::MatMul(self.clone(), other.clone()),
            tracked(&[self, other]),
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "add")?;
        let out = self.data().iter().zip(other.data()).map(|(a, b)| a + b).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            || Op::Add(self.clone(), other.clone()),
            tracked(&[self, other]),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "sub")?;
        let out = self.data().iter().zip(other.data()).map(|(a, b)| a - b).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            || Op::Sub(self.clone(), other.clone()),
            tracked(&[self, other]),
        ))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "mul")?;
        let out = self.data().iter().zip(other.data()).map(|(a, b)| a * b).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            || Op::Mul(self.clone(), other.clone()),
            tracked(&[self, other]),
        ))
    }

    pub fn scale(&self, s: f64) -> Tensor {
        let out = self.data().iter().map(|a| a * s).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            || Op::Scale(self.clone(), s),
            tracked(&[self]),
        )
    }

    /// `x[r×c] + v[c]`, broadcasting `v` over rows.
    pub fn add_row_vec(&self, v: &Tensor) -> Result<Tensor> {
        let (r, c) = self.dims2("add_row_vec")?;
        if v.numel() != c {
            return Err(Error::dim("add_row_vec", self.shape(), v.shape()));
        }
        let vd = v.data();
        let mut out = self.to_vec();
        for row in out.chunks_exact_mut(c).take(r) {
            for (o, b) in row.iter_mut().zip(vd) {
                *o += b;
            }
        }
        Ok(Tensor::from_op(
            vec![r, c],
            out,
            || Op::AddRowVec(self.clone(), v.clone()),
            tracked(&[self, v]),
        ))
    }

    /// `x[r×c] + v[r]`, broadcasting `v` over columns.
    pub fn add_col_vec(&self, v: &Tensor) -> Result<Tensor> {
        let (r, c) = self.dims2("add_col_vec")?;
        if v.numel() != r {
            return Err(Error::dim("add_col_vec", self.shape(), v.shape()));
        }
        let vd = v.data();
        let mut out = self.to_vec();
        for (row, b) in out.chunks_exact_mut(c).zip(vd) {
            for o in row.iter_mut() {
                *o += b;
            }
        }
        Ok(Tensor::from_op(
            vec![r, c],
            out,
            || Op::AddColVec(self.clone(), v.clone()),
            tracked(&[self, v]),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::dim("reshape", self.shape(), shape));
        }
        let mut t = Tensor::from_op(
            shape.to_vec(),
            Vec::new(),
            || Op::Reshape(self.clone()),
            tracked(&[self]),
        );
        t.data = self.data_arc().clone();
        Ok(t)
    }

    /// `out[i] = self[index[i]]` (flat indices), with the given output shape.
    pub fn gather(&self, index: Arc<Vec<usize>>, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != index.len() {
            return Err(Error::dim("gather", shape, &[index.len()]));
        }
        let src = self.data();
        let mut out = Vec::with_capacity(numel);
        for &i in index.iter() {
            match src.get(i) {
                Some(v) => out.push(*v),
                None => {
                    return Err(Error::Input(format!(
                        "gather index {i} out of range for {} elements",
                        src.len()
                    )))
                }
            }
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            out,
            || Op::Gather(self.clone(), index),
            tracked(&[self]),
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("transpose")?;
        let index: Vec<usize> = (0..c)
            .flat_map(|j| (0..r).map(move |i| i * c + j))
            .collect();
        self.gather(Arc::new(index), &[c, r])
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor> {
        let (r, c) = self.dims2("slice_cols")?;
        if start > end || end > c {
            return Err(Error::Input(format!("column slice {start}..{end} of width {c}")));
        }
        let w = end - start;
        let index: Vec<usize> = (0..r)
            .flat_map(|i| (start..end).map(move |j| i * c + j))
            .collect();
        self.gather(Arc::new(index), &[r, w])
    }

    /// Rows `start..end` of a 2-D tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        let (r, c) = self.dims2("slice_rows")?;
        if start > end || end > r {
            return Err(Error::Input(format!("row slice {start}..{end} of height {r}")));
        }
        let index: Vec<usize> = (start * c..end * c).collect();
        self.gather(Arc::new(index), &[end - start, c])
    }

    /// Stacks 2-D tensors of equal width along the first axis.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Input("concat of zero tensors".into()))?;
        let (_, c) = first.dims2("concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for p in parts {
            let (r, c2) = p.dims2("concat_rows")?;
            if c2 != c {
                return Err(Error::dim("concat_rows", first.shape(), p.shape()));
            }
            rows += r;
            out.extend_from_slice(p.data());
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        Ok(Tensor::from_op(
            vec![rows, c],
            out,
            || Op::Concat(parts.to_vec()),
            tracked(&refs),
        ))
    }

    /// Row-wise softmax with max subtraction. Columns whose `valid` entry
    /// is false receive probability exactly 0.
    pub fn softmax_rows_masked(&self, valid: Option<&[bool]>) -> Result<Tensor> {
        let (r, c) = self.dims2("softmax_rows")?;
        if let Some(v) = valid {
            if v.len() != c {
                return Err(Error::dim("softmax_rows", self.shape(), &[v.len()]));
            }
            if !v.iter().any(|&b| b) {
                return Err(Error::Input("softmax row with every column masked".into()));
            }
        }
        let keep = |j: usize| valid.is_none_or(|v| v[j]);
        let mut out = vec![0.0; r * c];
        for (row_in, row_out) in self.data().chunks_exact(c).zip(out.chunks_exact_mut(c)) {
            let mut max = f64::NEG_INFINITY;
            for (j, &x) in row_in.iter().enumerate() {
                if keep(j) && x > max {
                    max = x;
                }
            }
            let mut sum = 0.0;
            for (j, (&x, o)) in row_in.iter().zip(row_out.iter_mut()).enumerate() {
                if keep(j) {
                    *o = (x - max).exp();
                    sum += *o;
                }
            }
            for o in row_out.iter_mut() {
                *o /= sum;
            }
        }
        let out = Arc::new(out);
        let mut t = Tensor::from_op(
            vec![r, c],
            Vec::new(),
            || Op::Softmax(self.clone(), out.clone()),
            tracked(&[self]),
        );
        t.data = out;
        Ok(t)
    }

    pub fn softmax_rows(&self) -> Result<Tensor> {
        self.softmax_rows_masked(None)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Tensor {
        let out = self
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
            .collect();
        Tensor::from_op(self.shape().to_vec(), out, || Op::Gelu(self.clone()), tracked(&[self]))
    }

    pub fn silu(&self) -> Tensor {
        let out = self.data().iter().map(|&x| x * sigmoid(x)).collect();
        Tensor::from_op(self.shape().to_vec(), out, || Op::Silu(self.clone()), tracked(&[self]))
    }

    /// Normalizes each row of `x[r×c]` to zero mean and unit variance, then
    /// applies per-column gain and bias.
    pub fn layer_norm_rows(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let (r, c) = self.dims2("layer_norm_rows")?;
        if gamma.numel() != c || beta.numel() != c {
            return Err(Error::dim("layer_norm_rows", self.shape(), gamma.shape()));
        }
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        let (g, b) = (gamma.data(), beta.data());
        for i in 0..r {
            let row = &self.data()[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..c {
                let h = (row[j] - mean) * inv;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        Ok(Tensor::from_op(
            vec![r, c],
            out,
            || Op::LayerNorm {
                x: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                xhat: Arc::new(xhat),
                inv_std: Arc::new(inv_std),
            },
            tracked(&[self, gamma, beta]),
        ))
    }

    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        Tensor::from_op(vec![], vec![s], || Op::Sum(self.clone()), tracked(&[self]))
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn square(&self) -> Tensor {
        let out = self.data().iter().map(|x| x * x).collect();
        Tensor::from_op(self.shape().to_vec(), out, || Op::Square(self.clone()), tracked(&[self]))
    }

    /// Mean squared error between equally shaped tensors.
    pub fn mse(&self, target: &Tensor) -> Result<Tensor> {
        Ok(self.sub(target)?.square().mean())
    }

    /// 1×1 convolution: `x[c_in×h×w]`, `weight[c_out×c_in×1]` → `[c_out×h×w]`.
    pub fn conv1x1(&self, weight: &Tensor) -> Result<Tensor> {
        let (c_in, h, w) = match self.shape() {
            [c, h, w] => (*c, *h, *w),
            s => return Err(Error::dim("conv1x1", s, weight.shape())),
        };
        let (c_out, wc_in) = match weight.shape() {
            [o, i, 1] => (*o, *i),
            [o, i] => (*o, *i),
            s => return Err(Error::dim("conv1x1", self.shape(), s)),
        };
        if wc_in != c_in {
            return Err(Error::dim("conv1x1", self.shape(), weight.shape()));
        }
        let w2 = weight.reshape(&[c_out, c_in])?;
        let x2 = self.reshape(&[c_in, h * w])?;
        w2.matmul(&x2)?.reshape(&[c_out, h, w])
    }

    /// 3×3 convolution with zero padding: `x[c_in×h×w]`,
    /// `weight[c_out×c_in×9]` (taps row-major) → `[c_out×h×w]`.
    pub fn conv3x3(&self, weight: &Tensor) -> Result<Tensor> {
        let (c_in, h, w) = match self.shape() {
            [c, h, w] => (*c, *h, *w),
            s => return Err(Error::dim("conv3x3", s, weight.shape())),
        };
        let c_out = match weight.shape() {
            [o, i, 9] if *i == c_in => *o,
            s => return Err(Error::dim("conv3x3", self.shape(), s)),
        };
        let n = c_in * h * w;
        let zero = n;
        let mut index = Vec::with_capacity(9 * n);
        for c in 0..c_in {
            for ky in 0..3 {
                for kx in 0..3 {
                    for y in 0..h {
                        for x in 0..w {
                            let (sy, sx) = ((y + ky) as isize - 1, (x + kx) as isize - 1);
                            index.push(if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                zero
                            } else {
                                c * h * w + sy as usize * w + sx as usize
                            });
                        }
                    }
                }
            }
        }
        let padded = Tensor::concat_rows(&[self.reshape(&[n, 1])?, Tensor::zeros(&[1, 1])])?;
        let cols = padded.gather(Arc::new(index), &[9 * c_in, h * w])?;
        weight.reshape(&[c_out, 9 * c_in])?.matmul(&cols)?.reshape(&[c_out, h, w])
    }
}
