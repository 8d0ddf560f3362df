//! Recorded forward operations with reverse-mode gradients.
//!
//! A [`Tape`] owns every tensor produced during one forward pass. Operations
//! append a node holding the result value plus the recipe to push gradients
//! back to its inputs. [`Tape::backward`] walks the nodes in exact reverse
//! recording order, so topological order holds by construction.
//!
//! Gradients accumulate additively: a tensor used twice receives the sum of
//! both contributions. Tensors with `requires_grad == false` (constants,
//! attention masks) never allocate a gradient buffer.

use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::tensor::{numel, Tensor};
use rand::Rng;

/// Handle to a tensor on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorRef(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    /// `mul * x + add`, elementwise; only `mul` matters for backprop.
    Affine {
        a: usize,
        mul: f64,
    },
    Matmul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    /// Batched matmul over a shared leading dimension.
    Bmm {
        a: usize,
        b: usize,
        g: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    TransposeLast2 {
        a: usize,
    },
    Reshape {
        a: usize,
    },
    /// `[B, T, heads*dh] -> [B*heads, T, dh]`
    SplitHeads {
        a: usize,
        heads: usize,
    },
    /// `[B*heads, T, dh] -> [B, T, heads*dh]`
    MergeHeads {
        a: usize,
        heads: usize,
    },
    Softmax {
        a: usize,
        axis: usize,
    },
    LogSoftmax {
        a: usize,
        axis: usize,
    },
    LayerNorm {
        a: usize,
        gamma: usize,
        beta: usize,
        eps: f64,
    },
    Gelu {
        a: usize,
    },
    Sigmoid {
        a: usize,
    },
    Exp {
        a: usize,
    },
    PowConst {
        a: usize,
        exponent: f64,
    },
    /// Mean over unmasked positions: `[B,T,H]` with mask `[B,T]` -> `[B,H]`.
    MaskedMean {
        a: usize,
        mask: usize,
    },
    /// Sets masked entries of the last axis to -inf; mask is `[B, T_k]`.
    MaskFill {
        a: usize,
        mask: usize,
        batch: usize,
    },
    /// Elementwise product with a fixed (non-tape) mask, e.g. dropout.
    ScaleMask {
        a: usize,
        mask: Vec<f64>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    AddBias {
        a: usize,
        bias: usize,
    },
    ConcatLast {
        parts: Vec<usize>,
    },
    SliceLast {
        a: usize,
        start: usize,
        len: usize,
    },
    /// `sum_i coeffs[i] * parts[i]` with `coeffs` a tape tensor of length k.
    LinearCombination {
        parts: Vec<usize>,
        coeffs: usize,
    },
    SumAll {
        a: usize,
    },
    MeanAll {
        a: usize,
    },
    /// Row-wise pick: `[B,C]` with one column index per row -> `[B]`.
    GatherIndex {
        a: usize,
        indices: Vec<usize>,
    },
    /// Identity forward, gradient multiplied by `factor` on the way back.
    /// `factor != 1` deliberately breaks the chain rule; the gradient-check
    /// harness uses it to prove it can detect a wrong backward rule.
    GradScale {
        a: usize,
        factor: f64,
    },
}

struct Node {
    tensor: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, mut tensor: Tensor, op: Op) -> TensorRef {
        let id = self.nodes.len();
        tensor.node = Some(id);
        self.nodes.push(Node { tensor, op });
        TensorRef(id)
    }

    fn push_from(
        &mut self,
        values: Vec<f64>,
        shape: Vec<usize>,
        inputs: &[usize],
        op: Op,
    ) -> TensorRef {
        let requires = inputs.iter().any(|&i| self.nodes[i].tensor.requires_grad);
        let mut t = Tensor::new(values, shape);
        t.requires_grad = requires;
        self.push(t, op)
    }

    /// Registers an existing tensor (values copied) as a leaf.
    pub fn leaf(&mut self, tensor: &Tensor) -> TensorRef {
        let mut t = Tensor::new(tensor.values.clone(), tensor.shape.clone());
        t.requires_grad = tensor.requires_grad;
        self.push(t, Op::Leaf)
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, values: Vec<f64>, shape: Vec<usize>) -> TensorRef {
        self.push(Tensor::new(values, shape), Op::Leaf)
    }

    /// A leaf that receives gradients.
    pub fn var(&mut self, values: Vec<f64>, shape: Vec<usize>) -> TensorRef {
        self.push(Tensor::new(values, shape).with_grad(), Op::Leaf)
    }

    pub fn tensor(&self, r: TensorRef) -> &Tensor {
        &self.nodes[r.0].tensor
    }

    pub fn values(&self, r: TensorRef) -> &[f64] {
        &self.nodes[r.0].tensor.values
    }

    pub fn shape(&self, r: TensorRef) -> &[usize] {
        &self.nodes[r.0].tensor.shape
    }

    pub fn grad(&self, r: TensorRef) -> Option<&[f64]> {
        self.nodes[r.0].tensor.grad.as_deref()
    }

    pub fn scalar_value(&self, r: TensorRef) -> f64 {
        self.nodes[r.0].tensor.item()
    }

    // ── elementwise and linear ──────────────────────────────────────────

    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> TensorRef {
        self.binary_elementwise(a, b, "add", |x, y| x + y, |sa, sb| Op::Add { a: sa, b: sb })
    }

    pub fn sub(&mut self, a: TensorRef, b: TensorRef) -> TensorRef {
        self.binary_elementwise(a, b, "sub", |x, y| x - y, |sa, sb| Op::Sub { a: sa, b: sb })
    }

    pub fn mul(&mut self, a: TensorRef, b: TensorRef) -> TensorRef {
        self.binary_elementwise(a, b, "mul", |x, y| x * y, |sa, sb| Op::Mul { a: sa, b: sb })
    }

    fn binary_elementwise(
        &mut self,
        a: TensorRef,
        b: TensorRef,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(usize, usize) -> Op,
    ) -> TensorRef {
        let (ta, tb) = (&self.nodes[a.0].tensor, &self.nodes[b.0].tensor);
        assert_eq!(
            ta.shape, tb.shape,
            "{name}: shapes {:?} vs {:?}",
            ta.shape, tb.shape
        );
        let values = ta
            .values
            .iter()
            .zip(&tb.values)
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = ta.shape.clone();
        self.push_from(values, shape, &[a.0, b.0], op(a.0, b.0))
    }

    pub fn affine(&mut self, a: TensorRef, mul: f64, add: f64) -> TensorRef {
        let t = &self.nodes[a.0].tensor;
        let values = t.values.iter().map(|x| mul * x + add).collect();
        let shape = t.shape.clone();
        self.push_from(values, shape, &[a.0], Op::Affine { a: a.0, mul })
    }

    pub fn matmul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let values = matmul_raw(self.values(a), self.values(b), m, k, n);
        Ok(self.push_from(
            values,
            vec![m, n],
            &[a.0, b.0],
            Op::Matmul {
                a: a.0,
                b: b.0,
                m,
                k,
                n,
            },
        ))
    }

    pub fn bmm(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::ShapeMismatch {
                op: "bmm",
                left: sa,
                right: sb,
            });
        }
        let (g, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut values = vec![0.0; g * m * n];
        for i in 0..g {
            let block = matmul_raw(
                &self.values(a)[i * m * k..(i + 1) * m * k],
                &self.values(b)[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
            );
            values[i * m * n..(i + 1) * m * n].copy_from_slice(&block);
        }
        Ok(self.push_from(
            values,
            vec![g, m, n],
            &[a.0, b.0],
            Op::Bmm {
                a: a.0,
                b: b.0,
                g,
                m,
                k,
                n,
            },
        ))
    }

    pub fn transpose_last2(&mut self, a: TensorRef) -> TensorRef {
        let shape = self.shape(a).to_vec();
        assert!(
            shape.len() >= 2,
            "transpose_last2 needs >= 2 dims, got {shape:?}"
        );
        let (rows, cols) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let lead: usize = shape[..shape.len() - 2].iter().product();
        let src = self.values(a);
        let mut values = vec![0.0; src.len()];
        for l in 0..lead {
            let base = l * rows * cols;
            for i in 0..rows {
                for j in 0..cols {
                    values[base + j * rows + i] = src[base + i * cols + j];
                }
            }
        }
        let mut out_shape = shape.clone();
        let d = out_shape.len();
        out_shape.swap(d - 2, d - 1);
        self.push_from(values, out_shape, &[a.0], Op::TransposeLast2 { a: a.0 })
    }

    pub fn reshape(&mut self, a: TensorRef, shape: Vec<usize>) -> TensorRef {
        let t = &self.nodes[a.0].tensor;
        assert_eq!(
            t.numel(),
            numel(&shape),
            "reshape {:?} -> {:?}",
            t.shape,
            shape
        );
        let values = t.values.clone();
        self.push_from(values, shape, &[a.0], Op::Reshape { a: a.0 })
    }

    pub fn split_heads(&mut self, a: TensorRef, heads: usize) -> Result<TensorRef> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 3 || !shape[2].is_multiple_of(heads) {
            return Err(Error::ShapeMismatch {
                op: "split_heads",
                left: shape,
                right: vec![heads],
            });
        }
        let (b, t, h) = (shape[0], shape[1], shape[2]);
        let dh = h / heads;
        let src = self.values(a);
        let mut values = vec![0.0; src.len()];
        for bi in 0..b {
            for ti in 0..t {
                for j in 0..heads {
                    for d in 0..dh {
                        values[((bi * heads + j) * t + ti) * dh + d] =
                            src[(bi * t + ti) * h + j * dh + d];
                    }
                }
            }
        }
        Ok(self.push_from(
            values,
            vec![b * heads, t, dh],
            &[a.0],
            Op::SplitHeads { a: a.0, heads },
        ))
    }

    pub fn merge_heads(&mut self, a: TensorRef, heads: usize) -> Result<TensorRef> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 3 || !shape[0].is_multiple_of(heads) {
            return Err(Error::ShapeMismatch {
                op: "merge_heads",
                left: shape,
                right: vec![heads],
            });
        }
        let (bh, t, dh) = (shape[0], shape[1], shape[2]);
        let b = bh / heads;
        let h = heads * dh;
        let src = self.values(a);
        let mut values = vec![0.0; src.len()];
        for bi in 0..b {
            for ti in 0..t {
                for j in 0..heads {
                    for d in 0..dh {
                        values[(bi * t + ti) * h + j * dh + d] =
                            src[((bi * heads + j) * t + ti) * dh + d];
                    }
                }
            }
        }
        Ok(self.push_from(
            values,
            vec![b, t, h],
            &[a.0],
            Op::MergeHeads { a: a.0, heads },
        ))
    }

    // ── nonlinearities ──────────────────────────────────────────────────

    /// Softmax along `axis`, computed with max subtraction so entries of
    /// magnitude 1e3 stay finite.
    pub fn softmax(&mut self, a: TensorRef, axis: usize) -> TensorRef {
        let shape = self.shape(a).to_vec();
        assert!(
            axis < shape.len(),
            "softmax axis {axis} for shape {shape:?}"
        );
        let values = softmax_raw(self.values(a), &shape, axis, false);
        self.push_from(values, shape, &[a.0], Op::Softmax { a: a.0, axis })
    }

    pub fn log_softmax(&mut self, a: TensorRef, axis: usize) -> TensorRef {
        let shape = self.shape(a).to_vec();
        assert!(
            axis < shape.len(),
            "log_softmax axis {axis} for shape {shape:?}"
        );
        let values = softmax_raw(self.values(a), &shape, axis, true);
        self.push_from(values, shape, &[a.0], Op::LogSoftmax { a: a.0, axis })
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// the affine scale/shift.
    pub fn layer_norm(
        &mut self,
        a: TensorRef,
        gamma: TensorRef,
        beta: TensorRef,
        eps: f64,
    ) -> Result<TensorRef> {
        let shape = self.shape(a).to_vec();
        let h = *shape.last().ok_or_else(|| Error::ShapeMismatch {
            op: "layer_norm",
            left: shape.clone(),
            right: vec![],
        })?;
        if self.shape(gamma) != [h] || self.shape(beta) != [h] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                left: shape,
                right: self.shape(gamma).to_vec(),
            });
        }
        let src = self.values(a);
        let gv = self.values(gamma);
        let bv = self.values(beta);
        let mut values = vec![0.0; src.len()];
        for (row_out, row_in) in values.chunks_mut(h).zip(src.chunks(h)) {
            let mean = row_in.iter().sum::<f64>() / h as f64;
            let var = row_in.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / h as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for i in 0..h {
                row_out[i] = gv[i] * (row_in[i] - mean) * inv_std + bv[i];
            }
        }
        Ok(self.push_from(
            values,
            shape,
            &[a.0, gamma.0, beta.0],
            Op::LayerNorm {
                a: a.0,
                gamma: gamma.0,
                beta: beta.0,
                eps,
            },
        ))
    }

    /// Tanh-approximation GELU: `0.5x(1 + tanh(sqrt(2/pi)(x + 0.044715x^3)))`.
    pub fn gelu(&mut self, a: TensorRef) -> TensorRef {
        let t = &self.nodes[a.0].tensor;
        let values = t.values.iter().map(|&x| gelu_scalar(x)).collect();
        let shape = t.shape.clone();
        self.push_from(values, shape, &[a.0], Op::Gelu { a: a.0 })
    }

    pub fn sigmoid(&mut self, a: TensorRef) -> TensorRef {
        let t = &self.nodes[a.0].tensor;
        let values = t.values.iter().map(|&x| sigmoid_scalar(x)).collect();
        let shape = t.shape.clone();
        self.push_from(values, shape, &[a.0], Op::Sigmoid { a: a.0 })
    }

    pub fn exp(&mut self, a: TensorRef) -> TensorRef {
        let t = &self.nodes[a.0].tensor;
        let values = t.values.iter().map(|x| x.exp()).collect();
        let shape = t.shape.clone();
        self.push_from(values, shape, &[a.0], Op::Exp { a: a.0 })
    }

    /// Elementwise `x^exponent` for non-negative `x`.
    pub fn pow_const(&mut self, a: TensorRef, exponent: f64) -> TensorRef {
        let t = &self.nodes[a.0].tensor;
        let values = t.values.iter().map(|x| x.powf(exponent)).collect();
        let shape = t.shape.clone();
        self.push_from(values, shape, &[a.0], Op::PowConst { a: a.0, exponent })
    }

    // ── masking and aggregation ─────────────────────────────────────────

    /// Per-example average over unmasked positions. Masked positions
    /// contribute nothing to the value or to the gradient.
    pub fn masked_mean(&mut self, a: TensorRef, mask: TensorRef) -> Result<TensorRef> {
        let shape = self.shape(a).to_vec();
        let mshape = self.shape(mask).to_vec();
        if shape.len() != 3 || mshape != shape[..2] {
            return Err(Error::ShapeMismatch {
                op: "masked_mean",
                left: shape,
                right: mshape,
            });
        }
        let (b, t, h) = (shape[0], shape[1], shape[2]);
        let src = self.values(a);
        let mv = self.values(mask);
        let mut values = vec![0.0; b * h];
        for bi in 0..b {
            let count: f64 = mv[bi * t..(bi + 1) * t].iter().sum();
            if count == 0.0 {
                return Err(Error::EmptyMaskRow { row: bi });
            }
            for ti in 0..t {
                let m = mv[bi * t + ti];
                for hi in 0..h {
                    values[bi * h + hi] += m * src[(bi * t + ti) * h + hi];
                }
            }
            for hi in 0..h {
                values[bi * h + hi] /= count;
            }
        }
        Ok(self.push_from(
            values,
            vec![b, h],
            &[a.0, mask.0],
            Op::MaskedMean {
                a: a.0,
                mask: mask.0,
            },
        ))
    }

    /// Replaces entries of the last axis whose mask is 0 with -inf, so a
    /// following softmax assigns them exactly zero weight. The input is
    /// viewed as `[batch, rows, T_k]` with `mask: [batch, T_k]`.
    pub fn mask_fill_neg_inf(&mut self, a: TensorRef, mask: TensorRef) -> Result<TensorRef> {
        let shape = self.shape(a).to_vec();
        let mshape = self.shape(mask).to_vec();
        let tk = *shape.last().unwrap_or(&0);
        if mshape.len() != 2 || mshape[1] != tk {
            return Err(Error::ShapeMismatch {
                op: "mask_fill",
                left: shape,
                right: mshape,
            });
        }
        let batch = mshape[0];
        let total = numel(&shape);
        if tk == 0 || !total.is_multiple_of(batch * tk) {
            return Err(Error::ShapeMismatch {
                op: "mask_fill",
                left: shape,
                right: mshape,
            });
        }
        let rows_per_example = total / (batch * tk);
        let src = self.values(a);
        let mv = self.values(mask);
        let mut values = vec![0.0; total];
        for bi in 0..batch {
            for r in 0..rows_per_example {
                for j in 0..tk {
                    let idx = (bi * rows_per_example + r) * tk + j;
                    values[idx] = if mv[bi * tk + j] == 0.0 {
                        f64::NEG_INFINITY
                    } else {
                        src[idx]
                    };
                }
            }
        }
        Ok(self.push_from(
            values,
            shape,
            &[a.0, mask.0],
            Op::MaskFill {
                a: a.0,
                mask: mask.0,
                batch,
            },
        ))
    }

    /// Inverted dropout. In evaluation mode this is the identity (the input
    /// handle is returned untouched, so the output is bit-identical).
    pub fn dropout(
        &mut self,
        a: TensorRef,
        rate: f64,
        training: bool,
        rng: &mut StreamRng,
    ) -> Result<TensorRef> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!(
                "dropout rate {rate} must satisfy 0 <= rate < 1"
            )));
        }
        if !training {
            return Ok(a);
        }
        let n = self.nodes[a.0].tensor.numel();
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        Ok(self.apply_scale_mask(a, mask))
    }

    /// Elementwise product with a fixed coefficient mask. Dropout and the
    /// multi-sample dropout average both reduce to this.
    pub fn apply_scale_mask(&mut self, a: TensorRef, mask: Vec<f64>) -> TensorRef {
        let t = &self.nodes[a.0].tensor;
        assert_eq!(t.numel(), mask.len(), "scale mask length mismatch");
        let values = t.values.iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = t.shape.clone();
        self.push_from(values, shape, &[a.0], Op::ScaleMask { a: a.0, mask })
    }

    /// Row lookup: `out[i] = table[ids[i], :]`. Gradient scatter-adds into
    /// the table, so repeated ids accumulate.
    pub fn embedding(&mut self, table: TensorRef, ids: &[usize]) -> Result<TensorRef> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "embedding",
                left: shape,
                right: vec![ids.len()],
            });
        }
        let (v, h) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::TokenOutOfRange { id: bad, vocab: v });
        }
        let src = self.values(table);
        let mut values = vec![0.0; ids.len() * h];
        for (row, &id) in ids.iter().enumerate() {
            values[row * h..(row + 1) * h].copy_from_slice(&src[id * h..(id + 1) * h]);
        }
        Ok(self.push_from(
            values,
            vec![ids.len(), h],
            &[table.0],
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Broadcast-adds a vector over the last axis.
    pub fn add_bias(&mut self, a: TensorRef, bias: TensorRef) -> Result<TensorRef> {
        let shape = self.shape(a).to_vec();
        let bshape = self.shape(bias).to_vec();
        let n = *shape.last().unwrap_or(&0);
        if bshape != [n] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                left: shape,
                right: bshape,
            });
        }
        let src = self.values(a);
        let bv = self.values(bias);
        let values = src.iter().enumerate().map(|(i, x)| x + bv[i % n]).collect();
        Ok(self.push_from(
            values,
            shape,
            &[a.0, bias.0],
            Op::AddBias {
                a: a.0,
                bias: bias.0,
            },
        ))
    }

    pub fn concat_last(&mut self, parts: &[TensorRef]) -> Result<TensorRef> {
        assert!(!parts.is_empty(), "concat_last of zero tensors");
        let first = self.shape(parts[0]).to_vec();
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(Error::ShapeMismatch {
                    op: "concat_last",
                    left: first,
                    right: s.to_vec(),
                });
            }
            widths.push(s[s.len() - 1]);
        }
        let total_w: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut values = vec![0.0; rows * total_w];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.values(p);
            for r in 0..rows {
                values[r * total_w + offset..r * total_w + offset + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let mut shape = lead.to_vec();
        shape.push(total_w);
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push_from(values, shape, &ids, Op::ConcatLast { parts: ids.clone() }))
    }

    pub fn slice_last(&mut self, a: TensorRef, start: usize, len: usize) -> Result<TensorRef> {
        let shape = self.shape(a).to_vec();
        let w = *shape.last().unwrap_or(&0);
        if start + len > w {
            return Err(Error::ShapeMismatch {
                op: "slice_last",
                left: shape,
                right: vec![start, len],
            });
        }
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let src = self.values(a);
        let mut values = vec![0.0; rows * len];
        for r in 0..rows {
            values[r * len..(r + 1) * len]
                .copy_from_slice(&src[r * w + start..r * w + start + len]);
        }
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        out_shape.push(len);
        Ok(self.push_from(
            values,
            out_shape,
            &[a.0],
            Op::SliceLast { a: a.0, start, len },
        ))
    }

    /// `sum_i coeffs[i] * parts[i]`; all parts share one shape and `coeffs`
    /// has one entry per part.
    pub fn linear_combination(
        &mut self,
        parts: &[TensorRef],
        coeffs: TensorRef,
    ) -> Result<TensorRef> {
        assert!(!parts.is_empty(), "linear_combination of zero tensors");
        let shape = self.shape(parts[0]).to_vec();
        for &p in parts {
            if self.shape(p) != shape {
                return Err(Error::ShapeMismatch {
                    op: "linear_combination",
                    left: shape,
                    right: self.shape(p).to_vec(),
                });
            }
        }
        if self.shape(coeffs) != [parts.len()] {
            return Err(Error::ShapeMismatch {
                op: "linear_combination",
                left: vec![parts.len()],
                right: self.shape(coeffs).to_vec(),
            });
        }
        let n = numel(&shape);
        let mut values = vec![0.0; n];
        for (i, &p) in parts.iter().enumerate() {
            let c = self.values(coeffs)[i];
            let src = self.values(p);
            for (out, x) in values.iter_mut().zip(src) {
                *out += c * x;
            }
        }
        let mut ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let op = Op::LinearCombination {
            parts: ids.clone(),
            coeffs: coeffs.0,
        };
        ids.push(coeffs.0);
        Ok(self.push_from(values, shape, &ids, op))
    }

    pub fn sum_all(&mut self, a: TensorRef) -> TensorRef {
        let s: f64 = self.values(a).iter().sum();
        self.push_from(vec![s], vec![], &[a.0], Op::SumAll { a: a.0 })
    }

    pub fn mean_all(&mut self, a: TensorRef) -> TensorRef {
        let t = &self.nodes[a.0].tensor;
        let s: f64 = t.values.iter().sum::<f64>() / t.numel() as f64;
        self.push_from(vec![s], vec![], &[a.0], Op::MeanAll { a: a.0 })
    }

    /// Picks one column per row: `out[i] = a[i, indices[i]]`.
    pub fn gather_index(&mut self, a: TensorRef, indices: &[usize]) -> Result<TensorRef> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || shape[0] != indices.len() {
            return Err(Error::ShapeMismatch {
                op: "gather_index",
                left: shape,
                right: vec![indices.len()],
            });
        }
        let cols = shape[1];
        if let Some(&bad) = indices.iter().find(|&&i| i >= cols) {
            return Err(Error::TokenOutOfRange {
                id: bad,
                vocab: cols,
            });
        }
        let src = self.values(a);
        let values = indices
            .iter()
            .enumerate()
            .map(|(r, &c)| src[r * cols + c])
            .collect();
        Ok(self.push_from(
            values,
            vec![indices.len()],
            &[a.0],
            Op::GatherIndex {
                a: a.0,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Identity forward with the backward gradient multiplied by `factor`.
    /// Anything other than `factor = 1.0` is a deliberately corrupted
    /// backward rule; the gradcheck harness uses it as a sensitivity probe.
    pub fn scaled_grad_identity(&mut self, a: TensorRef, factor: f64) -> TensorRef {
        let t = &self.nodes[a.0].tensor;
        let values = t.values.clone();
        let shape = t.shape.clone();
        self.push_from(values, shape, &[a.0], Op::GradScale { a: a.0, factor })
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Populates `grad` on every `requires_grad` tensor reachable from
    /// `loss`. Gradients add across multiple uses of the same tensor.
    pub fn backward(&mut self, loss: TensorRef) -> Result<()> {
        let t = &self.nodes[loss.0].tensor;
        if t.numel() != 1 {
            return Err(Error::NonScalarLoss(t.shape.clone()));
        }
        self.accumulate(loss.0, &[1.0]);
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].tensor.requires_grad {
                continue;
            }
            let Some(grad) = self.nodes[i].tensor.grad.clone() else {
                continue;
            };
            self.backprop_node(i, &grad);
        }
        Ok(())
    }

    fn accumulate(&mut self, idx: usize, delta: &[f64]) {
        let tensor = &mut self.nodes[idx].tensor;
        if !tensor.requires_grad {
            return;
        }
        let n = tensor.numel();
        let grad = tensor.grad.get_or_insert_with(|| vec![0.0; n]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    fn backprop_node(&mut self, idx: usize, grad: &[f64]) {
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                self.accumulate(a, grad);
                self.accumulate(b, grad);
            }
            Op::Sub { a, b } => {
                self.accumulate(a, grad);
                let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
                self.accumulate(b, &neg);
            }
            Op::Mul { a, b } => {
                let da: Vec<f64> = grad
                    .iter()
                    .zip(self.values_at(b))
                    .map(|(g, y)| g * y)
                    .collect();
                let db: Vec<f64> = grad
                    .iter()
                    .zip(self.values_at(a))
                    .map(|(g, x)| g * x)
                    .collect();
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::Affine { a, mul } => {
                let da: Vec<f64> = grad.iter().map(|g| g * mul).collect();
                self.accumulate(a, &da);
            }
            Op::Matmul { a, b, m, k, n } => {
                // dA = dC * B^T, dB = A^T * dC
                let bt = transpose_raw(self.values_at(b), k, n);
                let da = matmul_raw(grad, &bt, m, n, k);
                let at = transpose_raw(self.values_at(a), m, k);
                let db = matmul_raw(&at, grad, k, m, n);
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::Bmm { a, b, g, m, k, n } => {
                let mut da = vec![0.0; g * m * k];
                let mut db = vec![0.0; g * k * n];
                for i in 0..g {
                    let ga = &grad[i * m * n..(i + 1) * m * n];
                    let av = &self.values_at(a)[i * m * k..(i + 1) * m * k];
                    let bv = &self.values_at(b)[i * k * n..(i + 1) * k * n];
                    let bt = transpose_raw(bv, k, n);
                    da[i * m * k..(i + 1) * m * k].copy_from_slice(&matmul_raw(ga, &bt, m, n, k));
                    let at = transpose_raw(av, m, k);
                    db[i * k * n..(i + 1) * k * n].copy_from_slice(&matmul_raw(&at, ga, k, m, n));
                }
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::TransposeLast2 { a } => {
                let shape = self.nodes[idx].tensor.shape.clone();
                let (rows, cols) = (shape[shape.len() - 2], shape[shape.len() - 1]);
                let lead: usize = shape[..shape.len() - 2].iter().product();
                let mut da = vec![0.0; grad.len()];
                for l in 0..lead {
                    let base = l * rows * cols;
                    for i in 0..rows {
                        for j in 0..cols {
                            da[base + j * rows + i] = grad[base + i * cols + j];
                        }
                    }
                }
                self.accumulate(a, &da);
            }
            Op::Reshape { a } => {
                self.accumulate(a, grad);
            }
            Op::SplitHeads { a, heads } => {
                let in_shape = self.nodes[a].tensor.shape.clone();
                let (b, t, h) = (in_shape[0], in_shape[1], in_shape[2]);
                let dh = h / heads;
                let mut da = vec![0.0; grad.len()];
                for bi in 0..b {
                    for ti in 0..t {
                        for j in 0..heads {
                            for d in 0..dh {
                                da[(bi * t + ti) * h + j * dh + d] =
                                    grad[((bi * heads + j) * t + ti) * dh + d];
                            }
                        }
                    }
                }
                self.accumulate(a, &da);
            }
            Op::MergeHeads { a, heads } => {
                let in_shape = self.nodes[a].tensor.shape.clone();
                let (bh, t, dh) = (in_shape[0], in_shape[1], in_shape[2]);
                let b = bh / heads;
                let h = heads * dh;
                let mut da = vec![0.0; grad.len()];
                for bi in 0..b {
                    for ti in 0..t {
                        for j in 0..heads {
                            for d in 0..dh {
                                da[((bi * heads + j) * t + ti) * dh + d] =
                                    grad[(bi * t + ti) * h + j * dh + d];
                            }
                        }
                    }
                }
                self.accumulate(a, &da);
            }
            Op::Softmax { a, axis } => {
                let shape = self.nodes[idx].tensor.shape.clone();
                let out = self.nodes[idx].tensor.values.clone();
                let (outer, len, inner) = axis_split(&shape, axis);
                let mut da = vec![0.0; grad.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| grad[at(j)] * out[at(j)]).sum();
                        for j in 0..len {
                            da[at(j)] = out[at(j)] * (grad[at(j)] - dot);
                        }
                    }
                }
                self.accumulate(a, &da);
            }
            Op::LogSoftmax { a, axis } => {
                let shape = self.nodes[idx].tensor.shape.clone();
                let out = self.nodes[idx].tensor.values.clone();
                let (outer, len, inner) = axis_split(&shape, axis);
                let mut da = vec![0.0; grad.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let gsum: f64 = (0..len).map(|j| grad[at(j)]).sum();
                        for j in 0..len {
                            da[at(j)] = grad[at(j)] - out[at(j)].exp() * gsum;
                        }
                    }
                }
                self.accumulate(a, &da);
            }
            Op::LayerNorm {
                a,
                gamma,
                beta,
                eps,
            } => {
                let src = self.values_at(a).to_vec();
                let gv = self.values_at(gamma).to_vec();
                let h = gv.len();
                let rows = src.len() / h;
                let mut da = vec![0.0; src.len()];
                let mut dgamma = vec![0.0; h];
                let mut dbeta = vec![0.0; h];
                for r in 0..rows {
                    let row = &src[r * h..(r + 1) * h];
                    let g_row = &grad[r * h..(r + 1) * h];
                    let mean = row.iter().sum::<f64>() / h as f64;
                    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / h as f64;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|x| (x - mean) * inv_std).collect();
                    let gy: Vec<f64> = g_row.iter().zip(&gv).map(|(g, w)| g * w).collect();
                    let mean_gy = gy.iter().sum::<f64>() / h as f64;
                    let mean_gy_xhat =
                        gy.iter().zip(&xhat).map(|(g, x)| g * x).sum::<f64>() / h as f64;
                    for i in 0..h {
                        da[r * h + i] = (gy[i] - mean_gy - xhat[i] * mean_gy_xhat) * inv_std;
                        dgamma[i] += g_row[i] * xhat[i];
                        dbeta[i] += g_row[i];
                    }
                }
                self.accumulate(a, &da);
                self.accumulate(gamma, &dgamma);
                self.accumulate(beta, &dbeta);
            }
            Op::Gelu { a } => {
                let da: Vec<f64> = grad
                    .iter()
                    .zip(self.values_at(a))
                    .map(|(g, &x)| g * gelu_grad_scalar(x))
                    .collect();
                self.accumulate(a, &da);
            }
            Op::Sigmoid { a } => {
                let out = &self.nodes[idx].tensor.values;
                let da: Vec<f64> = grad
                    .iter()
                    .zip(out)
                    .map(|(g, s)| g * s * (1.0 - s))
                    .collect();
                self.accumulate(a, &da);
            }
            Op::Exp { a } => {
                let out = &self.nodes[idx].tensor.values;
                let da: Vec<f64> = grad.iter().zip(out).map(|(g, e)| g * e).collect();
                self.accumulate(a, &da);
            }
            Op::PowConst { a, exponent } => {
                let da: Vec<f64> = grad
                    .iter()
                    .zip(self.values_at(a))
                    .map(|(g, &x)| {
                        if exponent == 0.0 {
                            0.0
                        } else {
                            g * exponent * x.powf(exponent - 1.0)
                        }
                    })
                    .collect();
                self.accumulate(a, &da);
            }
            Op::MaskedMean { a, mask } => {
                let in_shape = self.nodes[a].tensor.shape.clone();
                let (b, t, h) = (in_shape[0], in_shape[1], in_shape[2]);
                let mv = self.values_at(mask).to_vec();
                let mut da = vec![0.0; b * t * h];
                for bi in 0..b {
                    let count: f64 = mv[bi * t..(bi + 1) * t].iter().sum();
                    for ti in 0..t {
                        let m = mv[bi * t + ti];
                        if m == 0.0 {
                            continue;
                        }
                        for hi in 0..h {
                            da[(bi * t + ti) * h + hi] = m / count * grad[bi * h + hi];
                        }
                    }
                }
                self.accumulate(a, &da);
            }
            Op::MaskFill { a, mask, batch } => {
                let shape = self.nodes[idx].tensor.shape.clone();
                let tk = *shape.last().unwrap();
                let rows_per_example = numel(&shape) / (batch * tk);
                let mv = self.values_at(mask).to_vec();
                let mut da = vec![0.0; grad.len()];
                for bi in 0..batch {
                    for r in 0..rows_per_example {
                        for j in 0..tk {
                            if mv[bi * tk + j] != 0.0 {
                                let idx2 = (bi * rows_per_example + r) * tk + j;
                                da[idx2] = grad[idx2];
                            }
                        }
                    }
                }
                self.accumulate(a, &da);
            }
            Op::ScaleMask { a, mask } => {
                let da: Vec<f64> = grad.iter().zip(&mask).map(|(g, m)| g * m).collect();
                self.accumulate(a, &da);
            }
            Op::Embedding { table, ids } => {
                let h = self.nodes[table].tensor.shape[1];
                let n = self.nodes[table].tensor.numel();
                let mut dt = vec![0.0; n];
                for (row, &id) in ids.iter().enumerate() {
                    for hi in 0..h {
                        dt[id * h + hi] += grad[row * h + hi];
                    }
                }
                self.accumulate(table, &dt);
            }
            Op::AddBias { a, bias } => {
                self.accumulate(a, grad);
                let n = self.nodes[bias].tensor.numel();
                let mut db = vec![0.0; n];
                for (i, g) in grad.iter().enumerate() {
                    db[i % n] += g;
                }
                self.accumulate(bias, &db);
            }
            Op::ConcatLast { parts } => {
                let widths: Vec<usize> = parts
                    .iter()
                    .map(|&p| *self.nodes[p].tensor.shape.last().unwrap())
                    .collect();
                let total_w: usize = widths.iter().sum();
                let rows = grad.len() / total_w;
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    let mut dp = vec![0.0; rows * w];
                    for r in 0..rows {
                        dp[r * w..(r + 1) * w]
                            .copy_from_slice(&grad[r * total_w + offset..r * total_w + offset + w]);
                    }
                    self.accumulate(p, &dp);
                    offset += w;
                }
            }
            Op::SliceLast { a, start, len } => {
                let in_shape = self.nodes[a].tensor.shape.clone();
                let w = *in_shape.last().unwrap();
                let rows = grad.len() / len;
                let mut da = vec![0.0; numel(&in_shape)];
                for r in 0..rows {
                    da[r * w + start..r * w + start + len]
                        .copy_from_slice(&grad[r * len..(r + 1) * len]);
                }
                self.accumulate(a, &da);
            }
            Op::LinearCombination { parts, coeffs } => {
                let cv = self.values_at(coeffs).to_vec();
                let mut dc = vec![0.0; parts.len()];
                for (i, &p) in parts.iter().enumerate() {
                    let da: Vec<f64> = grad.iter().map(|g| g * cv[i]).collect();
                    dc[i] = grad.iter().zip(self.values_at(p)).map(|(g, x)| g * x).sum();
                    self.accumulate(p, &da);
                }
                self.accumulate(coeffs, &dc);
            }
            Op::SumAll { a } => {
                let n = self.nodes[a].tensor.numel();
                let da = vec![grad[0]; n];
                self.accumulate(a, &da);
            }
            Op::MeanAll { a } => {
                let n = self.nodes[a].tensor.numel();
                let da = vec![grad[0] / n as f64; n];
                self.accumulate(a, &da);
            }
            Op::GatherIndex { a, indices } => {
                let cols = self.nodes[a].tensor.shape[1];
                let mut da = vec![0.0; self.nodes[a].tensor.numel()];
                for (r, &c) in indices.iter().enumerate() {
                    da[r * cols + c] += grad[r];
                }
                self.accumulate(a, &da);
            }
            Op::GradScale { a, factor } => {
                let da: Vec<f64> = grad.iter().map(|g| g * factor).collect();
                self.accumulate(a, &da);
            }
        }
    }

    fn values_at(&self, idx: usize) -> &[f64] {
        &self.nodes[idx].tensor.values
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += av * bj;
            }
        }
    }
    c
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn softmax_raw(src: &[f64], shape: &[usize], axis: usize, log: bool) -> Vec<f64> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let max = (0..len)
                .map(|j| src[at(j)])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..len {
                denom += (src[at(j)] - max).exp();
            }
            if log {
                let log_denom = denom.ln();
                for j in 0..len {
                    out[at(j)] = src[at(j)] - max - log_denom;
                }
            } else {
                for j in 0..len {
                    out[at(j)] = (src[at(j)] - max).exp() / denom;
                }
            }
        }
    }
    out
}

fn gelu_scalar(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let inner = c * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * c * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
