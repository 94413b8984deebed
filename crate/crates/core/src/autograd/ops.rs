//! Primitive operations and their backward rules.
//!
//! Matrix-shaped ops treat any tensor as `[rows, last_dim]`.

use super::kernels::{dot, gemm_nn, gemm_nt, gemm_tn};
use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub(crate) enum Op<T> {
    Leaf,
    Matmul { a: Var, b: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, s: T },
    AddScalar { x: Var },
    AddBias { x: Var, bias: Var },
    AddGroup { x: Var, delta: Var, group: usize },
    AddTiled { x: Var, tile: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Softmax { x: Var },
    Gelu { x: Var },
    Relu { x: Var },
    BatchNorm { x: Var, gamma: Var, beta: Option<Var>, xhat: Vec<T>, rstd: Vec<T> },
    Normalize { x: Var, gamma: Var, beta: Option<Var>, xhat: Vec<T>, inv: Vec<T> },
    Sum { x: Var },
    Mean { x: Var },
    SliceRows { x: Var, start: usize },
    ConcatRows { parts: Vec<Var> },
    GatherRows { x: Var, idx: Vec<usize> },
    GatherElems { x: Var, idx: Vec<usize> },
    Rope { x: Var, cos: Vec<T>, sin: Vec<T>, tokens: usize, dim: usize, heads: usize },
    Attention { qkv: Var, batch: usize, heads: usize, probs: Vec<T> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    PairwiseDist { x: Var },
}

impl<T> Op<T> {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Matmul { a, b } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Scale { x, .. }
            | Op::AddScalar { x }
            | Op::Softmax { x }
            | Op::Gelu { x }
            | Op::Relu { x }
            | Op::Sum { x }
            | Op::Mean { x }
            | Op::SliceRows { x, .. }
            | Op::GatherRows { x, .. }
            | Op::GatherElems { x, .. }
            | Op::Rope { x, .. }
            | Op::PairwiseDist { x } => vec![*x],
            Op::AddBias { x, bias } => vec![*x, *bias],
            Op::AddGroup { x, delta, .. } => vec![*x, *delta],
            Op::AddTiled { x, tile } => vec![*x, *tile],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::BatchNorm { x, gamma, beta, .. } | Op::Normalize { x, gamma, beta, .. } => {
                let mut v = vec![*x, *gamma];
                v.extend(beta);
                v
            }
            Op::ConcatRows { parts } => parts.clone(),
            Op::Attention { qkv, .. } => vec![*qkv],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

/// Per-feature statistics of one training-mode batch-norm call.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased (n − 1) variance, the convention for running estimates.
    pub var_unbiased: Vec<T>,
}

fn shape_err(what: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension(format!("{what}: incompatible shapes {a:?} and {b:?}"))
}

fn rowwise_shape(rows: usize, cols: usize, like: &[usize]) -> Vec<usize> {
    if like.len() >= 2 && like.iter().product::<usize>() == rows * cols && *like.last().unwrap() == cols {
        like.to_vec()
    } else {
        vec![rows, cols]
    }
}

fn gelu_cdf<T: Real>(x: T) -> T {
    T::lit(0.5) * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_pdf<T: Real>(x: T) -> T {
    (-(x * x) * T::lit(0.5)).exp() * T::lit(0.398_942_280_401_432_7)
}

/// `softmax` of one row, stabilized by subtracting the row maximum.
fn softmax_row<T: Real>(x: &[T], out: &mut [T]) {
    let m = x.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut s = T::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - m).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

impl<T: Real> Tape<T> {
    fn check_2d(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::Dimension(format!("{what} expects a rank-2 tensor, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    /// `a[m,k] · b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.check_2d(a, "matmul")?;
        let (k2, n) = self.check_2d(b, "matmul")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul: inner dimensions differ, {:?} · {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Matmul { a, b }))
    }

    /// `x · wᵀ + b` with `w` stored as `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xin = self.value(x).last_dim();
        let rows = self.value(x).rows();
        let (out_dim, in_dim) = self.check_2d(w, "linear weight")?;
        if xin != in_dim {
            return Err(shape_err("linear", self.shape(x), self.shape(w)));
        }
        let mut out = vec![T::zero(); rows * out_dim];
        gemm_nt(self.value(x).data(), self.value(w).data(), rows, in_dim, out_dim, &mut out);
        if let Some(b) = b {
            let bias = self.value(b);
            if bias.numel() != out_dim {
                return Err(shape_err("linear bias", bias.shape(), self.shape(w)));
            }
            for row in out.chunks_mut(out_dim) {
                for (o, &bv) in row.iter_mut().zip(bias.data()) {
                    *o += bv;
                }
            }
        }
        let shape = rowwise_shape(rows, out_dim, &[]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Linear { x, w, b }))
    }

    fn elementwise(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(what, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.elementwise(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.elementwise(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub { a, b }))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.elementwise(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&e| e * s).collect()).expect("same shape");
        self.push(t, Op::Scale { x, s })
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&e| e + c).collect()).expect("same shape");
        self.push(t, Op::AddScalar { x })
    }

    /// Adds `bias[D]` to every row of `x[..., D]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let d = tx.last_dim();
        if tb.numel() != d {
            return Err(shape_err("add_bias", tx.shape(), tb.shape()));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(d) {
            for (o, &b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddBias { x, bias }))
    }

    /// Adds `delta[g]` to rows `g*group .. (g+1)*group` of `x[G*group, D]`.
    pub fn add_group(&mut self, x: Var, delta: Var, group: usize) -> Result<Var> {
        let (tx, td) = (self.value(x), self.value(delta));
        let d = tx.last_dim();
        if td.last_dim() != d || td.rows() * group != tx.rows() {
            return Err(Error::Dimension(format!(
                "add_group: delta {:?} does not broadcast over {:?} in groups of {group}",
                td.shape(),
                tx.shape()
            )));
        }
        let mut data = tx.data().to_vec();
        for (r, row) in data.chunks_mut(d).enumerate() {
            for (o, &v) in row.iter_mut().zip(td.row(r / group)) {
                *o += v;
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddGroup { x, delta, group }))
    }

    /// Adds `tile[N, D]` to each consecutive block of `N` rows of `x`.
    pub fn add_tiled(&mut self, x: Var, tile: Var) -> Result<Var> {
        let (tx, tt) = (self.value(x), self.value(tile));
        let d = tx.last_dim();
        let n = tt.rows();
        if tt.last_dim() != d || tx.rows() % n != 0 {
            return Err(shape_err("add_tiled", tx.shape(), tt.shape()));
        }
        let mut data = tx.data().to_vec();
        for (r, row) in data.chunks_mut(d).enumerate() {
            for (o, &v) in row.iter_mut().zip(tt.row(r % n)) {
                *o += v;
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddTiled { x, tile }))
    }

    /// Per-row layer normalization with biased variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        if eps <= T::zero() {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        let tx = self.value(x);
        let d = tx.last_dim();
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.numel() != d || tb.numel() != d {
            return Err(shape_err("layer_norm", tx.shape(), tg.shape()));
        }
        let rows = tx.rows();
        let inv_d = T::one() / T::from_usize(d).unwrap();
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * tg.data()[c] + tb.data()[c];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, xhat, rstd }))
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let d = tx.last_dim();
        let mut out = vec![T::zero(); tx.numel()];
        for (o, row) in out.chunks_mut(d).zip(tx.data().chunks(d)) {
            softmax_row(row, o);
        }
        let t = Tensor::new(tx.shape().to_vec(), out).expect("same shape");
        self.push(t, Op::Softmax { x })
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| v * gelu_cdf(v)).collect();
        let t = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Gelu { x })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| v.max(T::zero())).collect();
        let t = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Relu { x })
    }

    /// Training-mode batch normalization over the rows of `x[B, D]`.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Option<Var>, eps: T) -> Result<(Var, BatchStats<T>)> {
        let (b, d) = self.check_2d(x, "batch_norm")?;
        if b < 2 {
            return Err(Error::Contract(format!(
                "batch_norm in training mode needs at least 2 rows, got {b}"
            )));
        }
        if self.value(gamma).numel() != d || beta.is_some_and(|v| self.value(v).numel() != d) {
            return Err(shape_err("batch_norm", self.shape(x), self.shape(gamma)));
        }
        let tx = self.value(x).data();
        let nb = T::from_usize(b).unwrap();
        let mut mean = vec![T::zero(); d];
        let mut var = vec![T::zero(); d];
        for r in 0..b {
            for c in 0..d {
                mean[c] += tx[r * d + c];
            }
        }
        mean.iter_mut().for_each(|m| *m /= nb);
        for r in 0..b {
            for c in 0..d {
                let z = tx[r * d + c] - mean[c];
                var[c] += z * z;
            }
        }
        let var_unbiased: Vec<T> = var.iter().map(|&v| v / (nb - T::one())).collect();
        let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v / nb + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = beta.map(|v| self.value(v).data());
        let mut xhat = vec![T::zero(); b * d];
        let mut out = vec![T::zero(); b * d];
        for r in 0..b {
            for c in 0..d {
                let h = (tx[r * d + c] - mean[c]) * rstd[c];
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + bt.map_or(T::zero(), |bt| bt[c]);
            }
        }
        let t = Tensor::new(vec![b, d], out)?;
        let v = self.push(t, Op::BatchNorm { x, gamma, beta, xhat, rstd });
        Ok((v, BatchStats { mean, var_unbiased }))
    }

    /// `(x − mean)/sqrt(var + eps) · gamma + beta` with fixed statistics
    /// (eval-mode batch norm).
    pub fn normalize_fixed(
        &mut self,
        x: Var,
        mean: &[T],
        var: &[T],
        gamma: Var,
        beta: Option<Var>,
        eps: T,
    ) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.last_dim();
        if mean.len() != d || var.len() != d || self.value(gamma).numel() != d {
            return Err(shape_err("normalize_fixed", tx.shape(), self.shape(gamma)));
        }
        let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = beta.map(|v| self.value(v).data());
        let mut xhat = vec![T::zero(); tx.numel()];
        let mut out = vec![T::zero(); tx.numel()];
        for (i, &v) in tx.data().iter().enumerate() {
            let c = i % d;
            let h = (v - mean[c]) * inv[c];
            xhat[i] = h;
            out[i] = h * g[c] + bt.map_or(T::zero(), |bt| bt[c]);
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Normalize { x, gamma, beta, xhat, inv }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let s = tx.data().iter().copied().sum::<T>() / T::from_usize(tx.numel()).unwrap();
        self.push(Tensor::scalar(s), Op::Mean { x })
    }

    /// Rows `start .. start + len` of `x` viewed as `[rows, last_dim]`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.last_dim();
        if len == 0 || start + len > tx.rows() {
            return Err(Error::Dimension(format!(
                "slice_rows {start}..{} out of range for {:?}",
                start + len,
                tx.shape()
            )));
        }
        let t = Tensor::new(vec![len, d], tx.data()[start * d..(start + len) * d].to_vec())?;
        Ok(self.push(t, Op::SliceRows { x, start }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Dimension("concat_rows of nothing".into()));
        };
        let d = self.value(first).last_dim();
        let mut data = Vec::new();
        for &p in parts {
            let tp = self.value(p);
            if tp.last_dim() != d {
                return Err(shape_err("concat_rows", self.shape(first), tp.shape()));
            }
            data.extend_from_slice(tp.data());
        }
        let rows = data.len() / d;
        let t = Tensor::new(vec![rows, d], data)?;
        Ok(self.push(t, Op::ConcatRows { parts: parts.to_vec() }))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.last_dim();
        if idx.is_empty() || idx.iter().any(|&i| i >= tx.rows()) {
            return Err(Error::Dimension(format!("gather_rows index out of range for {:?}", tx.shape())));
        }
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(tx.row(i));
        }
        let t = Tensor::new(vec![idx.len(), d], data)?;
        Ok(self.push(t, Op::GatherRows { x, idx: idx.to_vec() }))
    }

    /// Picks flat elements of `x` into a vector.
    pub fn gather_elems(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        if idx.is_empty() || idx.iter().any(|&i| i >= tx.numel()) {
            return Err(Error::Dimension(format!("gather_elems index out of range for {:?}", tx.shape())));
        }
        let data = idx.iter().map(|&i| tx.data()[i]).collect();
        let t = Tensor::new(vec![idx.len()], data)?;
        Ok(self.push(t, Op::GatherElems { x, idx: idx.to_vec() }))
    }

    /// Rotary embedding applied to the query and key thirds of a fused
    /// `qkv[B*T, 3D]` projection. `positions` has one entry per token of a
    /// sequence; a position of zero is the identity rotation. Adjacent channel
    /// pairs `(2i, 2i+1)` of each head rotate by `pos · base^(−2i/head_dim)`.
    pub fn rope_qkv(&mut self, qkv: Var, positions: &[T], heads: usize, base: T) -> Result<Var> {
        let tx = self.value(qkv);
        let three_d = tx.last_dim();
        if !three_d.is_multiple_of(3) {
            return Err(Error::Dimension(format!("rope expects fused qkv, got {:?}", tx.shape())));
        }
        let dim = three_d / 3;
        let tokens = positions.len();
        if heads == 0 || !dim.is_multiple_of(heads) || !(dim / heads).is_multiple_of(2) {
            return Err(Error::Config(format!(
                "rope needs an even head width; dim {dim} over {heads} heads"
            )));
        }
        if tokens == 0 || !tx.rows().is_multiple_of(tokens) {
            return Err(Error::Dimension(format!(
                "rope: {} positions do not tile {} rows",
                tokens,
                tx.rows()
            )));
        }
        let (cos, sin) = rope_tables(positions, dim / heads, base);
        let mut out = tx.data().to_vec();
        let half = dim / heads / 2;
        for (r, row) in out.chunks_mut(three_d).enumerate() {
            let t = r % tokens;
            for seg in 0..2 {
                for h in 0..heads {
                    let base_c = seg * dim + h * (dim / heads);
                    for i in 0..half {
                        let (c, s) = (cos[t * half + i], sin[t * half + i]);
                        let (a, b) = (row[base_c + 2 * i], row[base_c + 2 * i + 1]);
                        row[base_c + 2 * i] = a * c - b * s;
                        row[base_c + 2 * i + 1] = a * s + b * c;
                    }
                }
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Rope { x: qkv, cos, sin, tokens, dim, heads }))
    }

    /// Multi-head scaled dot-product attention over a fused `qkv[B*T, 3D]`,
    /// each of the `batch` sequences attending only within itself. Returns
    /// `[B*T, D]` with heads concatenated.
    pub fn attention(&mut self, qkv: Var, batch: usize, heads: usize) -> Result<Var> {
        let tx = self.value(qkv);
        let three_d = tx.last_dim();
        if !three_d.is_multiple_of(3) || batch == 0 || !tx.rows().is_multiple_of(batch) {
            return Err(Error::Dimension(format!(
                "attention expects fused qkv over {batch} sequences, got {:?}",
                tx.shape()
            )));
        }
        let dim = three_d / 3;
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("dim {dim} is not divisible by {heads} heads")));
        }
        let tokens = tx.rows() / batch;
        let hd = dim / heads;
        let scale = T::one() / T::from_usize(hd).unwrap().sqrt();
        let src = tx.data();
        let mut out = vec![T::zero(); batch * tokens * dim];
        let mut probs = vec![T::zero(); batch * heads * tokens * tokens];
        let mut scores = vec![T::zero(); tokens];
        for b in 0..batch {
            for h in 0..heads {
                let p_off = (b * heads + h) * tokens * tokens;
                for i in 0..tokens {
                    let qi = (b * tokens + i) * three_d + h * hd;
                    for j in 0..tokens {
                        let kj = (b * tokens + j) * three_d + dim + h * hd;
                        scores[j] = dot(&src[qi..qi + hd], &src[kj..kj + hd]) * scale;
                    }
                    let p_row = &mut probs[p_off + i * tokens..p_off + (i + 1) * tokens];
                    softmax_row(&scores, p_row);
                    let o = (b * tokens + i) * dim + h * hd;
                    for j in 0..tokens {
                        let p = p_row[j];
                        let vj = (b * tokens + j) * three_d + 2 * dim + h * hd;
                        for c in 0..hd {
                            out[o + c] += p * src[vj + c];
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![batch * tokens, dim], out)?;
        Ok(self.push(t, Op::Attention { qkv, batch, heads, probs }))
    }

    /// Mean cross-entropy of `logits[B, C]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.check_2d(logits, "cross_entropy")?;
        if labels.len() != b {
            return Err(Error::Dimension(format!("{} labels for {b} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Data(format!("label {bad} outside [0, {c})")));
        }
        let tl = self.value(logits);
        let mut probs = vec![T::zero(); b * c];
        let mut loss = T::zero();
        for r in 0..b {
            let row = tl.row(r);
            let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = row.iter().map(|&v| (v - m).exp()).sum::<T>().ln() + m;
            loss += lse - row[labels[r]];
            softmax_row(row, &mut probs[r * c..(r + 1) * c]);
        }
        loss /= T::from_usize(b).unwrap();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
        ))
    }

    /// Euclidean distances between all rows of `x[B, D]`, giving `[B, B]`.
    /// The gradient at a zero distance is taken as zero.
    pub fn pairwise_distance(&mut self, x: Var) -> Result<Var> {
        let (b, _) = self.check_2d(x, "pairwise_distance")?;
        let tx = self.value(x);
        let mut out = vec![T::zero(); b * b];
        for i in 0..b {
            for j in (i + 1)..b {
                let s = tx.row(i).iter().zip(tx.row(j)).map(|(&u, &v)| (u - v) * (u - v)).sum::<T>().sqrt();
                out[i * b + j] = s;
                out[j * b + i] = s;
            }
        }
        let t = Tensor::new(vec![b, b], out)?;
        Ok(self.push(t, Op::PairwiseDist { x }))
    }

    pub(crate) fn backward_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |ga| gemm_nt(g, bv, m, n, k, ga));
                self.acc(grads, *b, |gb| gemm_tn(av, g, k, m, n, gb));
            }
            Op::Linear { x, w, b } => {
                let (out_dim, in_dim) = (self.shape(*w)[0], self.shape(*w)[1]);
                let rows = self.value(*x).rows();
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                self.acc(grads, *x, |gx| gemm_nn(g, wv, rows, out_dim, in_dim, gx));
                self.acc(grads, *w, |gw| gemm_tn(g, xv, out_dim, rows, in_dim, gw));
                if let Some(b) = b {
                    self.acc(grads, *b, |gb| {
                        for row in g.chunks(out_dim) {
                            for (o, &v) in gb.iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                    });
                }
            }
            Op::Add { a, b } => {
                self.acc(grads, *a, |ga| add_into(ga, g));
                self.acc(grads, *b, |gb| add_into(gb, g));
            }
            Op::Sub { a, b } => {
                self.acc(grads, *a, |ga| add_into(ga, g));
                self.acc(grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(o, &v)| *o -= v));
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                self.acc(grads, *b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale { x, s } => {
                self.acc(grads, *x, |gx| gx.iter_mut().zip(g).for_each(|(o, &v)| *o += v * *s));
            }
            Op::AddScalar { x } => self.acc(grads, *x, |gx| add_into(gx, g)),
            Op::AddBias { x, bias } => {
                let d = out.last_dim();
                self.acc(grads, *x, |gx| add_into(gx, g));
                self.acc(grads, *bias, |gb| {
                    for row in g.chunks(d) {
                        add_into(gb, row);
                    }
                });
            }
            Op::AddGroup { x, delta, group } => {
                let d = out.last_dim();
                self.acc(grads, *x, |gx| add_into(gx, g));
                self.acc(grads, *delta, |gd| {
                    for (r, row) in g.chunks(d).enumerate() {
                        let gi = r / group;
                        add_into(&mut gd[gi * d..(gi + 1) * d], row);
                    }
                });
            }
            Op::AddTiled { x, tile } => {
                let d = out.last_dim();
                let n = self.value(*tile).rows();
                self.acc(grads, *x, |gx| add_into(gx, g));
                self.acc(grads, *tile, |gt| {
                    for (r, row) in g.chunks(d).enumerate() {
                        let ti = r % n;
                        add_into(&mut gt[ti * d..(ti + 1) * d], row);
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = out.last_dim();
                let gm = self.value(*gamma).data();
                let inv_d = T::one() / T::from_usize(d).unwrap();
                self.acc(grads, *x, |gx| {
                    for (r, grow) in g.chunks(d).enumerate() {
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for c in 0..d {
                            let dxh = grow[c] * gm[c];
                            m1 += dxh;
                            m2 += dxh * xh[c];
                        }
                        m1 *= inv_d;
                        m2 *= inv_d;
                        for c in 0..d {
                            let dxh = grow[c] * gm[c];
                            gx[r * d + c] += rstd[r] * (dxh - m1 - xh[c] * m2);
                        }
                    }
                });
                self.acc(grads, *gamma, |gg| {
                    for (r, grow) in g.chunks(d).enumerate() {
                        for c in 0..d {
                            gg[c] += grow[c] * xhat[r * d + c];
                        }
                    }
                });
                self.acc(grads, *beta, |gb| {
                    for grow in g.chunks(d) {
                        add_into(gb, grow);
                    }
                });
            }
            Op::Softmax { x } => {
                let d = out.last_dim();
                let y = out.data();
                self.acc(grads, *x, |gx| {
                    for r in 0..out.rows() {
                        let (yr, gr) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                        let s = dot(yr, gr);
                        for c in 0..d {
                            gx[r * d + c] += yr[c] * (gr[c] - s);
                        }
                    }
                });
            }
            Op::Gelu { x } => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        let v = xv[i];
                        gx[i] += g[i] * (gelu_cdf(v) + v * gelu_pdf(v));
                    }
                });
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        if xv[i] > T::zero() {
                            gx[i] += g[i];
                        }
                    }
                });
            }
            Op::BatchNorm { x, gamma, beta, xhat, rstd } => {
                let d = out.last_dim();
                let b = out.rows();
                let nb = T::from_usize(b).unwrap();
                let gm = self.value(*gamma).data();
                self.acc(grads, *x, |gx| {
                    let mut s1 = vec![T::zero(); d];
                    let mut s2 = vec![T::zero(); d];
                    for r in 0..b {
                        for c in 0..d {
                            let dxh = g[r * d + c] * gm[c];
                            s1[c] += dxh;
                            s2[c] += dxh * xhat[r * d + c];
                        }
                    }
                    for r in 0..b {
                        for c in 0..d {
                            let dxh = g[r * d + c] * gm[c];
                            gx[r * d + c] += rstd[c] / nb * (nb * dxh - s1[c] - xhat[r * d + c] * s2[c]);
                        }
                    }
                });
                self.acc(grads, *gamma, |gg| {
                    for i in 0..g.len() {
                        gg[i % d] += g[i] * xhat[i];
                    }
                });
                if let Some(beta) = beta {
                    self.acc(grads, *beta, |gb| {
                        for row in g.chunks(d) {
                            add_into(gb, row);
                        }
                    });
                }
            }
            Op::Normalize { x, gamma, beta, xhat, inv } => {
                let d = out.last_dim();
                let gm = self.value(*gamma).data();
                self.acc(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * gm[i % d] * inv[i % d];
                    }
                });
                self.acc(grads, *gamma, |gg| {
                    for i in 0..g.len() {
                        gg[i % d] += g[i] * xhat[i];
                    }
                });
                if let Some(beta) = beta {
                    self.acc(grads, *beta, |gb| {
                        for row in g.chunks(d) {
                            add_into(gb, row);
                        }
                    });
                }
            }
            Op::Sum { x } => self.acc(grads, *x, |gx| gx.iter_mut().for_each(|o| *o += g[0])),
            Op::Mean { x } => {
                let n = T::from_usize(self.value(*x).numel()).unwrap();
                self.acc(grads, *x, |gx| gx.iter_mut().for_each(|o| *o += g[0] / n));
            }
            Op::SliceRows { x, start } => {
                let d = out.last_dim();
                self.acc(grads, *x, |gx| add_into(&mut gx[start * d..start * d + g.len()], g));
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    self.acc(grads, p, |gp| add_into(gp, &g[off..off + n]));
                    off += n;
                }
            }
            Op::GatherRows { x, idx } => {
                let d = out.last_dim();
                self.acc(grads, *x, |gx| {
                    for (k, &i) in idx.iter().enumerate() {
                        add_into(&mut gx[i * d..(i + 1) * d], &g[k * d..(k + 1) * d]);
                    }
                });
            }
            Op::GatherElems { x, idx } => {
                self.acc(grads, *x, |gx| {
                    for (k, &i) in idx.iter().enumerate() {
                        gx[i] += g[k];
                    }
                });
            }
            Op::Rope { x, cos, sin, tokens, dim, heads } => {
                let three_d = 3 * dim;
                let hd = dim / heads;
                let half = hd / 2;
                self.acc(grads, *x, |gx| {
                    for (r, grow) in g.chunks(three_d).enumerate() {
                        let t = r % tokens;
                        let gxr = &mut gx[r * three_d..(r + 1) * three_d];
                        for c in 2 * dim..three_d {
                            gxr[c] += grow[c];
                        }
                        for seg in 0..2 {
                            for h in 0..*heads {
                                let base_c = seg * dim + h * hd;
                                for i in 0..half {
                                    let (cs, sn) = (cos[t * half + i], sin[t * half + i]);
                                    let (ga, gb) = (grow[base_c + 2 * i], grow[base_c + 2 * i + 1]);
                                    gxr[base_c + 2 * i] += ga * cs + gb * sn;
                                    gxr[base_c + 2 * i + 1] += -ga * sn + gb * cs;
                                }
                            }
                        }
                    }
                });
            }
            Op::Attention { qkv, batch, heads, probs } => {
                let src = self.value(*qkv).data();
                let three_d = self.value(*qkv).last_dim();
                let dim = three_d / 3;
                let tokens = out.rows() / batch;
                let hd = dim / heads;
                let scale = T::one() / T::from_usize(hd).unwrap().sqrt();
                self.acc(grads, *qkv, |gq| {
                    let mut dp = vec![T::zero(); tokens];
                    for b in 0..*batch {
                        for h in 0..*heads {
                            let p_off = (b * heads + h) * tokens * tokens;
                            for i in 0..tokens {
                                let o = (b * tokens + i) * dim + h * hd;
                                let go = &g[o..o + hd];
                                let p_row = &probs[p_off + i * tokens..p_off + (i + 1) * tokens];
                                for j in 0..tokens {
                                    let vj = (b * tokens + j) * three_d + 2 * dim + h * hd;
                                    dp[j] = dot(go, &src[vj..vj + hd]);
                                    for c in 0..hd {
                                        gq[vj + c] += p_row[j] * go[c];
                                    }
                                }
                                let s = dot(p_row, &dp);
                                let qi = (b * tokens + i) * three_d + h * hd;
                                for j in 0..tokens {
                                    let ds = p_row[j] * (dp[j] - s) * scale;
                                    if ds == T::zero() {
                                        continue;
                                    }
                                    let kj = (b * tokens + j) * three_d + dim + h * hd;
                                    for c in 0..hd {
                                        gq[qi + c] += ds * src[kj + c];
                                        gq[kj + c] += ds * src[qi + c];
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = self.shape(*logits)[1];
                let nb = T::from_usize(labels.len()).unwrap();
                self.acc(grads, *logits, |gl| {
                    for (r, &l) in labels.iter().enumerate() {
                        for k in 0..c {
                            let target = if k == l { T::one() } else { T::zero() };
                            gl[r * c + k] += g[0] * (probs[r * c + k] - target) / nb;
                        }
                    }
                });
            }
            Op::PairwiseDist { x } => {
                let xv = self.value(*x);
                let b = xv.rows();
                let d = xv.last_dim();
                let dist = out.data();
                self.acc(grads, *x, |gx| {
                    for i in 0..b {
                        for j in 0..b {
                            let dij = dist[i * b + j];
                            if i == j || dij == T::zero() {
                                continue;
                            }
                            let coef = g[i * b + j] / dij;
                            if coef == T::zero() {
                                continue;
                            }
                            for k in 0..d {
                                let diff = xv.data()[i * d + k] - xv.data()[j * d + k];
                                gx[i * d + k] += coef * diff;
                                gx[j * d + k] -= coef * diff;
                            }
                        }
                    }
                });
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (o, &v) in dst.iter_mut().zip(src) {
        *o += v;
    }
}

/// `cos`/`sin` tables of shape `[positions, head_dim/2]`.
pub(crate) fn rope_tables<T: Real>(positions: &[T], head_dim: usize, base: T) -> (Vec<T>, Vec<T>) {
    let half = head_dim / 2;
    let mut cos = Vec::with_capacity(positions.len() * half);
    let mut sin = Vec::with_capacity(positions.len() * half);
    for &p in positions {
        for i in 0..half {
            let theta = base.powf(-T::from_usize(2 * i).unwrap() / T::from_usize(head_dim).unwrap());
            let angle = p * theta;
            cos.push(angle.cos());
            sin.push(angle.sin());
        }
    }
    (cos, sin)
}
