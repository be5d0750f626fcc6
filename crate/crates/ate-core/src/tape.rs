//! Reverse-mode automatic differentiation over recorded tensor ops.
//!
//! A [`Tape`] records the forward pass as a flat list of nodes (a Wengert
//! list); [`Tape::backward`] walks it once in reverse, applying each op's
//! vector-Jacobian product. Gradients only flow where they are needed:
//! constant leaves (frozen parameters, data) mark whole subtrees as
//! gradient-free and their partials are never computed.

use std::collections::BTreeMap;

use crate::error::{AteError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    /// Differentiable leaf: graph input or trainable parameter.
    Leaf,
    /// Non-differentiable leaf: data, frozen parameter.
    Const,
    Linear { x: usize, w: usize, b: usize },
    Matmul { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddScaled { a: usize, b: usize, c: f64 },
    Scale { x: usize, c: f64 },
    AddRowVec { x: usize, v: usize },
    MulRowVec { x: usize, v: usize },
    MulColScalar { x: usize, s: usize },
    Relu { x: usize },
    Tanh { x: usize },
    Gelu { x: usize },
    Exp { x: usize },
    Square { x: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, normed: Tensor, inv_std: Vec<f64> },
    Attention(Box<AttnRecord>),
    GatherRows { x: usize, seq: usize, offset: usize },
    /// out[b·seq + r] = p[r] for every sample b.
    TileRows { p: usize, batch: usize },
    /// Per sample: rows become [tok_a, tok_b, x_rows...].
    PrependTokens { x: usize, tok_a: usize, tok_b: usize, seq: usize },
    ConcatCols { parts: Vec<usize> },
    Embedding { table: usize, ids: Vec<usize> },
    RowSum { x: usize },
    MeanAll { x: usize },
    Mmd(Box<MmdRecord>),
}

/// Multi-head attention with Q from `q_in` and K/V from `kv_in`
/// (`q_in == kv_in` for self-attention). Packed layout: (batch·seq)×width.
struct AttnRecord {
    q_in: usize,
    kv_in: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    bq: usize,
    bv: usize,
    bo: usize,
    batch: usize,
    q_seq: usize,
    kv_seq: usize,
    heads: usize,
    // forward caches, one entry per batch sample
    q: Vec<Tensor>,
    k: Vec<Tensor>,
    v: Vec<Tensor>,
    concat: Vec<Tensor>,
    attn: Vec<Vec<Tensor>>, // [sample][head] -> q_seq×kv_seq softmax weights
}

struct MmdRecord {
    x: usize,
    y: usize,
    bandwidths: Vec<f64>,
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    params: BTreeMap<String, Tensor>,
    inputs: BTreeMap<usize, Tensor>,
}

impl Gradients {
    /// Gradient for a named parameter; exact zeros if the parameter was
    /// never on a path to the output.
    pub fn wrt_param(&self, store: &ParamStore, name: &str) -> Result<Tensor> {
        match self.params.get(name) {
            Some(g) => Ok(g.clone()),
            None => {
                let p = store.get(name)?;
                Ok(Tensor::zeros(p.rows(), p.cols()))
            }
        }
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    /// Gradient with respect to a differentiable input leaf.
    pub fn wrt_input(&self, var: Var) -> Option<&Tensor> {
        self.inputs.get(&var.0)
    }
}

pub struct Tape {
    nodes: Vec<Node>,
    /// node id -> parameter name, for trainable leaves
    param_names: BTreeMap<usize, String>,
    consumed: bool,
    freeze: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), param_names: BTreeMap::new(), consumed: false, freeze: false }
    }

    /// While set, [`Tape::param`] records constant leaves: whole sub-models
    /// can be recorded frozen without touching their builders.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.freeze = frozen;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Leaf => true,
            Op::Const => false,
            other => op_parents(other).iter().any(|&p| self.nodes[p].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input leaf.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Const)
    }

    /// Trainable parameter leaf; gradients come back under this name.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if self.freeze {
            return self.param_frozen(store, name);
        }
        let t = store.get(name)?.clone();
        let v = self.push(t, Op::Leaf);
        self.param_names.insert(v.0, name.to_string());
        Ok(v)
    }

    /// Frozen parameter leaf: participates in the forward pass, receives no
    /// gradient, and blocks gradient flow into itself.
    pub fn param_frozen(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let t = store.get(name)?.clone();
        Ok(self.push(t, Op::Const))
    }

    // ---- ops ----------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add { a: a.0, b: b.0 }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub { a: a.0, b: b.0 }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(v, Op::Mul { a: a.0, b: b.0 }))
    }

    /// a + c·b
    pub fn add_scaled(&mut self, a: Var, b: Var, c: f64) -> Result<Var> {
        let mut v = self.value(a).clone();
        if v.shape() != self.value(b).shape() {
            return Err(AteError::dim(
                "add_scaled",
                format!("{:?} vs {:?}", v.shape(), self.value(b).shape()),
            ));
        }
        v.add_scaled_in_place(self.value(b), c);
        Ok(self.push(v, Op::AddScaled { a: a.0, b: b.0, c }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).scale(c);
        self.push(v, Op::Scale { x: x.0, c })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::Matmul { a: a.0, b: b.0 }))
    }

    /// x·W + b with b broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        if bv.rows() != 1 || bv.cols() != wv.cols() {
            return Err(AteError::dim(
                "linear",
                format!("bias {:?} for weight {:?}", bv.shape(), wv.shape()),
            ));
        }
        let mut y = xv.matmul(wv).map_err(|_| {
            AteError::dim("linear", format!("input {:?} x weight {:?}", xv.shape(), wv.shape()))
        })?;
        for r in 0..y.rows() {
            let row = y.row_mut(r);
            for (o, &bi) in row.iter_mut().zip(bv.data()) {
                *o += bi;
            }
        }
        Ok(self.push(y, Op::Linear { x: x.0, w: w.0, b: b.0 }))
    }

    /// Adds a 1×d row vector to every row of x.
    pub fn add_row_vec(&mut self, x: Var, v: Var) -> Result<Var> {
        let xv = self.value(x);
        let vv = self.value(v);
        if vv.rows() != 1 || vv.cols() != xv.cols() {
            return Err(AteError::dim(
                "add_row_vec",
                format!("{:?} + {:?}", xv.shape(), vv.shape()),
            ));
        }
        let mut y = xv.clone();
        for r in 0..y.rows() {
            for (o, &b) in y.row_mut(r).iter_mut().zip(vv.data()) {
                *o += b;
            }
        }
        Ok(self.push(y, Op::AddRowVec { x: x.0, v: v.0 }))
    }

    /// Multiplies every row of x elementwise by a 1×d row vector.
    pub fn mul_row_vec(&mut self, x: Var, v: Var) -> Result<Var> {
        let xv = self.value(x);
        let vv = self.value(v);
        if vv.rows() != 1 || vv.cols() != xv.cols() {
            return Err(AteError::dim(
                "mul_row_vec",
                format!("{:?} * {:?}", xv.shape(), vv.shape()),
            ));
        }
        let mut y = xv.clone();
        for r in 0..y.rows() {
            for (o, &b) in y.row_mut(r).iter_mut().zip(vv.data()) {
                *o *= b;
            }
        }
        Ok(self.push(y, Op::MulRowVec { x: x.0, v: v.0 }))
    }

    /// Scales row r of x by s[r] (s is n×1).
    pub fn mul_col_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let xv = self.value(x);
        let sv = self.value(s);
        if sv.cols() != 1 || sv.rows() != xv.rows() {
            return Err(AteError::dim(
                "mul_col_scalar",
                format!("{:?} * {:?}", xv.shape(), sv.shape()),
            ));
        }
        let mut y = xv.clone();
        for r in 0..y.rows() {
            let c = sv.at(r, 0);
            for o in y.row_mut(r) {
                *o *= c;
            }
        }
        Ok(self.push(y, Op::MulColScalar { x: x.0, s: s.0 }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(0.0));
        self.push(v, Op::Relu { x: x.0 })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::tanh);
        self.push(v, Op::Tanh { x: x.0 })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(gelu);
        self.push(v, Op::Gelu { x: x.0 })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::exp);
        self.push(v, Op::Exp { x: x.0 })
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a * a);
        self.push(v, Op::Square { x: x.0 })
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let d = xv.cols();
        if gv.shape() != (1, d) || bv.shape() != (1, d) {
            return Err(AteError::dim(
                "layer_norm",
                format!("gamma {:?} beta {:?} for input {:?}", gv.shape(), bv.shape(), xv.shape()),
            ));
        }
        let mut normed = Tensor::zeros(xv.rows(), d);
        let mut inv_std = Vec::with_capacity(xv.rows());
        let mut y = Tensor::zeros(xv.rows(), d);
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for c in 0..d {
                let n = (row[c] - mean) * inv;
                normed.set(r, c, n);
                y.set(r, c, n * gv.at(0, c) + bv.at(0, c));
            }
        }
        Ok(self.push(
            y,
            Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, normed, inv_std },
        ))
    }

    /// Multi-head scaled dot-product attention over packed sequences.
    /// `q_in` is (batch·q_seq)×width; `kv_in` is (batch·kv_seq)×width.
    /// Pass `q_in == kv_in` (and equal seq lens) for self-attention.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q_in: Var,
        kv_in: Var,
        weights: AttnWeights,
        batch: usize,
        q_seq: usize,
        kv_seq: usize,
        heads: usize,
    ) -> Result<Var> {
        let width = self.value(q_in).cols();
        if width % heads != 0 {
            return Err(AteError::dim(
                "attention",
                format!("width {width} not divisible by {heads} heads"),
            ));
        }
        if self.value(q_in).rows() != batch * q_seq {
            return Err(AteError::dim(
                "attention",
                format!("q rows {} != batch*seq {}", self.value(q_in).rows(), batch * q_seq),
            ));
        }
        if self.value(kv_in).rows() != batch * kv_seq {
            return Err(AteError::dim(
                "attention",
                format!("kv rows {} != batch*seq {}", self.value(kv_in).rows(), batch * kv_seq),
            ));
        }
        let head_dim = width / heads;
        let scale = 1.0 / (head_dim as f64).sqrt();

        let mut q_cache = Vec::with_capacity(batch);
        let mut k_cache = Vec::with_capacity(batch);
        let mut v_cache = Vec::with_capacity(batch);
        let mut o_cache = Vec::with_capacity(batch);
        let mut a_cache = Vec::with_capacity(batch);
        let mut y = Tensor::zeros(batch * q_seq, width);

        for s in 0..batch {
            let xq = self.value(q_in).slice_rows(s * q_seq, q_seq);
            let xkv = self.value(kv_in).slice_rows(s * kv_seq, kv_seq);
            let q = affine(&xq, self.value(weights.wq), self.value(weights.bq))?;
            // keys carry no bias: a shared key offset shifts every score in a
            // row equally and softmax cancels it exactly
            let k = xkv.matmul(self.value(weights.wk))?;
            let v = affine(&xkv, self.value(weights.wv), self.value(weights.bv))?;

            let mut concat = Tensor::zeros(q_seq, width);
            let mut heads_attn = Vec::with_capacity(heads);
            for h in 0..heads {
                let qs = take_cols(&q, h * head_dim, head_dim);
                let ks = take_cols(&k, h * head_dim, head_dim);
                let vs = take_cols(&v, h * head_dim, head_dim);
                let mut scores = qs.matmul_nt(&ks)?;
                for v in scores.data_mut() {
                    *v *= scale;
                }
                softmax_rows(&mut scores);
                let out = scores.matmul(&vs)?;
                put_cols(&mut concat, &out, h * head_dim);
                heads_attn.push(scores);
            }
            let yb = affine(&concat, self.value(weights.wo), self.value(weights.bo))?;
            for r in 0..q_seq {
                y.row_mut(s * q_seq + r).copy_from_slice(yb.row(r));
            }
            q_cache.push(q);
            k_cache.push(k);
            v_cache.push(v);
            o_cache.push(concat);
            a_cache.push(heads_attn);
        }

        let rec = AttnRecord {
            q_in: q_in.0,
            kv_in: kv_in.0,
            wq: weights.wq.0,
            wk: weights.wk.0,
            wv: weights.wv.0,
            wo: weights.wo.0,
            bq: weights.bq.0,
            bv: weights.bv.0,
            bo: weights.bo.0,
            batch,
            q_seq,
            kv_seq,
            heads,
            q: q_cache,
            k: k_cache,
            v: v_cache,
            concat: o_cache,
            attn: a_cache,
        };
        Ok(self.push(y, Op::Attention(Box::new(rec))))
    }

    /// Repeats an s×w tensor `batch` times into a packed (batch·s)×w tensor.
    pub fn tile_rows(&mut self, p: Var, batch: usize) -> Var {
        let pv = self.value(p);
        let (s, w) = pv.shape();
        let mut y = Tensor::zeros(batch * s, w);
        for b in 0..batch {
            for r in 0..s {
                y.row_mut(b * s + r).copy_from_slice(pv.row(r));
            }
        }
        self.push(y, Op::TileRows { p: p.0, batch })
    }

    /// Prepends two 1×w token rows to every sample of a packed
    /// (batch·seq)×w tensor, yielding (batch·(seq+2))×w.
    pub fn prepend_tokens(
        &mut self,
        x: Var,
        tok_a: Var,
        tok_b: Var,
        batch: usize,
        seq: usize,
    ) -> Result<Var> {
        let xv = self.value(x);
        let (ta, tb) = (self.value(tok_a), self.value(tok_b));
        if xv.rows() != batch * seq {
            return Err(AteError::dim(
                "prepend_tokens",
                format!("rows {} != batch {batch} * seq {seq}", xv.rows()),
            ));
        }
        if ta.shape() != (1, xv.cols()) || tb.shape() != (1, xv.cols()) {
            return Err(AteError::dim(
                "prepend_tokens",
                format!("tokens {:?}/{:?} for width {}", ta.shape(), tb.shape(), xv.cols()),
            ));
        }
        let out_seq = seq + 2;
        let mut y = Tensor::zeros(batch * out_seq, xv.cols());
        for b in 0..batch {
            y.row_mut(b * out_seq).copy_from_slice(ta.row(0));
            y.row_mut(b * out_seq + 1).copy_from_slice(tb.row(0));
            for r in 0..seq {
                y.row_mut(b * out_seq + 2 + r).copy_from_slice(xv.row(b * seq + r));
            }
        }
        Ok(self.push(y, Op::PrependTokens { x: x.0, tok_a: tok_a.0, tok_b: tok_b.0, seq }))
    }

    /// Picks row `offset` of every sample from a packed (batch·seq)×w tensor.
    pub fn gather_rows(&mut self, x: Var, batch: usize, seq: usize, offset: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() != batch * seq || offset >= seq {
            return Err(AteError::dim(
                "gather_rows",
                format!("rows {} batch {batch} seq {seq} offset {offset}", xv.rows()),
            ));
        }
        let mut y = Tensor::zeros(batch, xv.cols());
        for s in 0..batch {
            y.row_mut(s).copy_from_slice(xv.row(s * seq + offset));
        }
        Ok(self.push(y, Op::GatherRows { x: x.0, seq, offset }))
    }

    /// Horizontal concatenation of tensors with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(AteError::dim("concat_cols", "no parts"));
        }
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut y = Tensor::zeros(rows, total);
        let mut off = 0;
        for p in parts {
            let pv = self.value(*p);
            if pv.rows() != rows {
                return Err(AteError::dim(
                    "concat_cols",
                    format!("row mismatch {} vs {}", pv.rows(), rows),
                ));
            }
            for r in 0..rows {
                y.row_mut(r)[off..off + pv.cols()].copy_from_slice(pv.row(r));
            }
            off += pv.cols();
        }
        Ok(self.push(y, Op::ConcatCols { parts: parts.iter().map(|p| p.0).collect() }))
    }

    /// Row lookup into an embedding table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let mut y = Tensor::zeros(ids.len(), tv.cols());
        for (r, &id) in ids.iter().enumerate() {
            if id >= tv.rows() {
                return Err(AteError::dim(
                    "embedding",
                    format!("id {id} out of {} rows", tv.rows()),
                ));
            }
            y.row_mut(r).copy_from_slice(tv.row(id));
        }
        Ok(self.push(y, Op::Embedding { table: table.0, ids: ids.to_vec() }))
    }

    /// Per-row sum: n×d → n×1.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut y = Tensor::zeros(xv.rows(), 1);
        for r in 0..xv.rows() {
            y.set(r, 0, xv.row(r).iter().sum());
        }
        self.push(y, Op::RowSum { x: x.0 })
    }

    /// Mean over all elements: → 1×1.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let m = self.value(x).mean();
        self.push(
            Tensor::from_vec(1, 1, vec![m]).expect("1x1"),
            Op::MeanAll { x: x.0 },
        )
    }

    /// Biased (V-statistic) squared MMD between the rows of x and y under a
    /// sum of RBF kernels, one per bandwidth. Output is 1×1.
    pub fn mmd_biased(&mut self, x: Var, y: Var, bandwidths: &[f64]) -> Result<Var> {
        let xv = self.value(x);
        let yv = self.value(y);
        if xv.cols() != yv.cols() {
            return Err(AteError::dim(
                "mmd_biased",
                format!("{:?} vs {:?}", xv.shape(), yv.shape()),
            ));
        }
        if xv.rows() == 0 || yv.rows() == 0 {
            return Err(AteError::dim("mmd_biased", "empty sample set"));
        }
        if bandwidths.is_empty() {
            return Err(AteError::NumericDomain("mmd_biased: no bandwidths".into()));
        }
        let value = mmd_value(xv, yv, bandwidths);
        Ok(self.push(
            Tensor::from_vec(1, 1, vec![value]).expect("1x1"),
            Op::Mmd(Box::new(MmdRecord { x: x.0, y: y.0, bandwidths: bandwidths.to_vec() })),
        ))
    }

    // ---- backward -----------------------------------------------------

    /// Propagates `output_grad` from `output` back to every differentiable
    /// leaf. Consumes the tape: a second call is a usage error.
    pub fn backward(&mut self, output: Var, output_grad: &Tensor) -> Result<Gradients> {
        if self.consumed {
            return Err(AteError::Usage("tape already consumed by backward".into()));
        }
        self.consumed = true;
        if output_grad.shape() != self.value(output).shape() {
            return Err(AteError::dim(
                "backward",
                format!(
                    "output grad {:?} vs output {:?}",
                    output_grad.shape(),
                    self.value(output).shape()
                ),
            ));
        }

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(output_grad.clone());

        for i in (0..self.nodes.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads)?;
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g); // keep leaf grads for collection
            }
        }

        let mut out = Gradients::default();
        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                if let Some(name) = self.param_names.get(&i) {
                    out.params
                        .entry(name.clone())
                        .and_modify(|acc| acc.add_scaled_in_place(&g, 1.0))
                        .or_insert(g);
                } else {
                    out.inputs.insert(i, g);
                }
            }
        }
        Ok(out)
    }

    fn backprop_node(
        &self,
        i: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let mut acc = |idx: usize, t: Tensor, nodes: &[Node]| {
            if !nodes[idx].needs_grad {
                return;
            }
            match &mut grads[idx] {
                Some(existing) => existing.add_scaled_in_place(&t, 1.0),
                slot @ None => *slot = Some(t),
            }
        };
        let nodes = &self.nodes;
        let val = |idx: usize| &nodes[idx].value;
        let ng = |idx: usize| nodes[idx].needs_grad;

        match &nodes[i].op {
            Op::Leaf | Op::Const => {}
            Op::Add { a, b } => {
                acc(*a, g.clone(), nodes);
                acc(*b, g.clone(), nodes);
            }
            Op::Sub { a, b } => {
                acc(*a, g.clone(), nodes);
                acc(*b, g.scale(-1.0), nodes);
            }
            Op::Mul { a, b } => {
                if ng(*a) {
                    acc(*a, g.hadamard(val(*b))?, nodes);
                }
                if ng(*b) {
                    acc(*b, g.hadamard(val(*a))?, nodes);
                }
            }
            Op::AddScaled { a, b, c } => {
                acc(*a, g.clone(), nodes);
                acc(*b, g.scale(*c), nodes);
            }
            Op::Scale { x, c } => acc(*x, g.scale(*c), nodes),
            Op::Matmul { a, b } => {
                if ng(*a) {
                    acc(*a, g.matmul_nt(val(*b))?, nodes);
                }
                if ng(*b) {
                    acc(*b, val(*a).matmul_tn(g)?, nodes);
                }
            }
            Op::Linear { x, w, b } => {
                if ng(*x) {
                    acc(*x, g.matmul_nt(val(*w))?, nodes);
                }
                if ng(*w) {
                    acc(*w, val(*x).matmul_tn(g)?, nodes);
                }
                if ng(*b) {
                    acc(*b, col_sums(g), nodes);
                }
            }
            Op::AddRowVec { x, v } => {
                acc(*x, g.clone(), nodes);
                if ng(*v) {
                    acc(*v, col_sums(g), nodes);
                }
            }
            Op::MulRowVec { x, v } => {
                if ng(*x) {
                    let mut dx = g.clone();
                    let vv = val(*v);
                    for r in 0..dx.rows() {
                        for (o, &b) in dx.row_mut(r).iter_mut().zip(vv.data()) {
                            *o *= b;
                        }
                    }
                    acc(*x, dx, nodes);
                }
                if ng(*v) {
                    let xv = val(*x);
                    let mut dv = Tensor::zeros(1, xv.cols());
                    for r in 0..xv.rows() {
                        for c in 0..xv.cols() {
                            dv.data_mut()[c] += g.at(r, c) * xv.at(r, c);
                        }
                    }
                    acc(*v, dv, nodes);
                }
            }
            Op::MulColScalar { x, s } => {
                if ng(*x) {
                    let sv = val(*s);
                    let mut dx = g.clone();
                    for r in 0..dx.rows() {
                        let c = sv.at(r, 0);
                        for o in dx.row_mut(r) {
                            *o *= c;
                        }
                    }
                    acc(*x, dx, nodes);
                }
                if ng(*s) {
                    let xv = val(*x);
                    let mut ds = Tensor::zeros(xv.rows(), 1);
                    for r in 0..xv.rows() {
                        let dot: f64 = g.row(r).iter().zip(xv.row(r)).map(|(a, b)| a * b).sum();
                        ds.set(r, 0, dot);
                    }
                    acc(*s, ds, nodes);
                }
            }
            Op::Relu { x } => {
                let xv = val(*x);
                let mut dx = g.clone();
                for (o, &a) in dx.data_mut().iter_mut().zip(xv.data()) {
                    if a <= 0.0 {
                        *o = 0.0;
                    }
                }
                acc(*x, dx, nodes);
            }
            Op::Tanh { x } => {
                let yv = &nodes[i].value;
                let mut dx = g.clone();
                for (o, &y) in dx.data_mut().iter_mut().zip(yv.data()) {
                    *o *= 1.0 - y * y;
                }
                acc(*x, dx, nodes);
            }
            Op::Gelu { x } => {
                let xv = val(*x);
                let mut dx = g.clone();
                for (o, &a) in dx.data_mut().iter_mut().zip(xv.data()) {
                    *o *= gelu_deriv(a);
                }
                acc(*x, dx, nodes);
            }
            Op::Exp { x } => {
                let yv = &nodes[i].value;
                acc(*x, g.hadamard(yv)?, nodes);
            }
            Op::Square { x } => {
                let xv = val(*x);
                let mut dx = g.clone();
                for (o, &a) in dx.data_mut().iter_mut().zip(xv.data()) {
                    *o *= 2.0 * a;
                }
                acc(*x, dx, nodes);
            }
            Op::LayerNorm { x, gamma, beta, normed, inv_std } => {
                let gv = val(*gamma);
                let d = normed.cols() as f64;
                if ng(*x) {
                    let mut dx = Tensor::zeros(normed.rows(), normed.cols());
                    for r in 0..normed.rows() {
                        let inv = inv_std[r];
                        let gr = g.row(r);
                        let nr = normed.row(r);
                        let mut sum_dn = 0.0;
                        let mut sum_dn_n = 0.0;
                        for c in 0..nr.len() {
                            let dn = gr[c] * gv.at(0, c);
                            sum_dn += dn;
                            sum_dn_n += dn * nr[c];
                        }
                        let row = dx.row_mut(r);
                        for c in 0..nr.len() {
                            let dn = gr[c] * gv.at(0, c);
                            row[c] = inv * (dn - sum_dn / d - nr[c] * sum_dn_n / d);
                        }
                    }
                    acc(*x, dx, nodes);
                }
                if ng(*gamma) {
                    let mut dg = Tensor::zeros(1, normed.cols());
                    for r in 0..normed.rows() {
                        for c in 0..normed.cols() {
                            dg.data_mut()[c] += g.at(r, c) * normed.at(r, c);
                        }
                    }
                    acc(*gamma, dg, nodes);
                }
                if ng(*beta) {
                    acc(*beta, col_sums(g), nodes);
                }
            }
            Op::Attention(rec) => {
                self.backprop_attention(rec, g, &mut acc)?;
            }
            Op::GatherRows { x, seq, offset } => {
                let xv = val(*x);
                let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                for s in 0..g.rows() {
                    dx.row_mut(s * seq + offset).copy_from_slice(g.row(s));
                }
                acc(*x, dx, nodes);
            }
            Op::TileRows { p, batch } => {
                if ng(*p) {
                    let pv = val(*p);
                    let (s, w) = pv.shape();
                    let mut dp = Tensor::zeros(s, w);
                    for b in 0..*batch {
                        for r in 0..s {
                            for (o, &v) in dp.row_mut(r).iter_mut().zip(g.row(b * s + r)) {
                                *o += v;
                            }
                        }
                    }
                    acc(*p, dp, nodes);
                }
            }
            Op::PrependTokens { x, tok_a, tok_b, seq } => {
                let xv = val(*x);
                let out_seq = seq + 2;
                let batch = xv.rows() / seq;
                if ng(*x) {
                    let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                    for b in 0..batch {
                        for r in 0..*seq {
                            dx.row_mut(b * seq + r)
                                .copy_from_slice(g.row(b * out_seq + 2 + r));
                        }
                    }
                    acc(*x, dx, nodes);
                }
                for (tok, off) in [(*tok_a, 0usize), (*tok_b, 1usize)] {
                    if ng(tok) {
                        let mut dt = Tensor::zeros(1, xv.cols());
                        for b in 0..batch {
                            for (o, &v) in dt.data_mut().iter_mut().zip(g.row(b * out_seq + off)) {
                                *o += v;
                            }
                        }
                        acc(tok, dt, nodes);
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let mut off = 0;
                for &p in parts {
                    let cols = val(p).cols();
                    if ng(p) {
                        let mut dp = Tensor::zeros(g.rows(), cols);
                        for r in 0..g.rows() {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                        }
                        acc(p, dp, nodes);
                    }
                    off += cols;
                }
            }
            Op::Embedding { table, ids } => {
                if ng(*table) {
                    let tv = val(*table);
                    let mut dt = Tensor::zeros(tv.rows(), tv.cols());
                    for (r, &id) in ids.iter().enumerate() {
                        let row = dt.row_mut(id);
                        for (o, &v) in row.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(*table, dt, nodes);
                }
            }
            Op::RowSum { x } => {
                let xv = val(*x);
                let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    let gr = g.at(r, 0);
                    for o in dx.row_mut(r) {
                        *o = gr;
                    }
                }
                acc(*x, dx, nodes);
            }
            Op::MeanAll { x } => {
                let xv = val(*x);
                let c = g.at(0, 0) / xv.len() as f64;
                acc(*x, Tensor::filled(xv.rows(), xv.cols(), c), nodes);
            }
            Op::Mmd(rec) => {
                let go = g.at(0, 0);
                let (dx, dy) = mmd_grads(val(rec.x), val(rec.y), &rec.bandwidths);
                if ng(rec.x) {
                    acc(rec.x, dx.scale(go), nodes);
                }
                if ng(rec.y) {
                    acc(rec.y, dy.scale(go), nodes);
                }
            }
        }
        Ok(())
    }

    fn backprop_attention(
        &self,
        rec: &AttnRecord,
        g: &Tensor,
        acc: &mut impl FnMut(usize, Tensor, &[Node]),
    ) -> Result<()> {
        let nodes = &self.nodes;
        let val = |idx: usize| &nodes[idx].value;
        let width = val(rec.wq).rows();
        let head_dim = width / rec.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let q_grad = nodes[rec.q_in].needs_grad;
        let kv_grad = nodes[rec.kv_in].needs_grad;
        // frozen layers (guidance encoder) skip all weight-gradient work
        let w_grad = nodes[rec.wq].needs_grad;

        let mut d_q_in = Tensor::zeros(rec.batch * rec.q_seq, width);
        let mut d_kv_in = Tensor::zeros(rec.batch * rec.kv_seq, width);
        let mut d_wq = Tensor::zeros(width, width);
        let mut d_wk = Tensor::zeros(width, width);
        let mut d_wv = Tensor::zeros(width, width);
        let mut d_wo = Tensor::zeros(width, width);
        let mut d_bq = Tensor::zeros(1, width);
        let mut d_bv = Tensor::zeros(1, width);
        let mut d_bo = Tensor::zeros(1, width);

        for s in 0..rec.batch {
            let gy = g.slice_rows(s * rec.q_seq, rec.q_seq);
            let concat = &rec.concat[s];
            if w_grad {
                d_wo.add_scaled_in_place(&concat.matmul_tn(&gy)?, 1.0);
                d_bo.add_scaled_in_place(&col_sums(&gy), 1.0);
            }
            let d_concat = gy.matmul_nt(val(rec.wo))?;

            let q = &rec.q[s];
            let k = &rec.k[s];
            let v = &rec.v[s];
            let mut dq = Tensor::zeros(rec.q_seq, width);
            let mut dk = Tensor::zeros(rec.kv_seq, width);
            let mut dv = Tensor::zeros(rec.kv_seq, width);

            for h in 0..rec.heads {
                let off = h * head_dim;
                let d_oh = take_cols(&d_concat, off, head_dim);
                let a = &rec.attn[s][h];
                let vs = take_cols(v, off, head_dim);
                let qs = take_cols(q, off, head_dim);
                let ks = take_cols(k, off, head_dim);

                let mut d_a = d_oh.matmul_nt(&vs)?;
                let d_vh = a.matmul_tn(&d_oh)?;
                // softmax rows backward: dS = A ⊙ (dA − rowsum(dA ⊙ A))
                for r in 0..d_a.rows() {
                    let ar = a.row(r);
                    let dot: f64 = d_a.row(r).iter().zip(ar).map(|(x, y)| x * y).sum();
                    let dr = d_a.row_mut(r);
                    for c in 0..dr.len() {
                        dr[c] = ar[c] * (dr[c] - dot);
                    }
                }
                let d_qh = d_a.matmul(&ks)?.scale(scale);
                let d_kh = d_a.matmul_tn(&qs)?.scale(scale); // dK = dSᵀ·Q
                put_cols_add(&mut dq, &d_qh, off);
                put_cols_add(&mut dk, &d_kh, off);
                put_cols_add(&mut dv, &d_vh, off);
            }

            if w_grad {
                let xq = val(rec.q_in).slice_rows(s * rec.q_seq, rec.q_seq);
                let xkv = val(rec.kv_in).slice_rows(s * rec.kv_seq, rec.kv_seq);
                d_wq.add_scaled_in_place(&xq.matmul_tn(&dq)?, 1.0);
                d_wk.add_scaled_in_place(&xkv.matmul_tn(&dk)?, 1.0);
                d_wv.add_scaled_in_place(&xkv.matmul_tn(&dv)?, 1.0);
                d_bq.add_scaled_in_place(&col_sums(&dq), 1.0);
                d_bv.add_scaled_in_place(&col_sums(&dv), 1.0);
            }

            if q_grad {
                let dxq = dq.matmul_nt(val(rec.wq))?;
                for r in 0..rec.q_seq {
                    let dst = d_q_in.row_mut(s * rec.q_seq + r);
                    for (o, &x) in dst.iter_mut().zip(dxq.row(r)) {
                        *o += x;
                    }
                }
            }
            if kv_grad {
                let dxk = dk.matmul_nt(val(rec.wk))?;
                let dxv = dv.matmul_nt(val(rec.wv))?;
                for r in 0..rec.kv_seq {
                    let dst = d_kv_in.row_mut(s * rec.kv_seq + r);
                    for ((o, &a), &b) in dst.iter_mut().zip(dxk.row(r)).zip(dxv.row(r)) {
                        *o += a + b;
                    }
                }
            }
        }

        if rec.q_in == rec.kv_in {
            if q_grad {
                d_q_in.add_scaled_in_place(&d_kv_in, 1.0);
                acc(rec.q_in, d_q_in, nodes);
            }
        } else {
            if q_grad {
                acc(rec.q_in, d_q_in, nodes);
            }
            if kv_grad {
                acc(rec.kv_in, d_kv_in, nodes);
            }
        }

        if w_grad {
            acc(rec.wq, d_wq, nodes);
            acc(rec.wk, d_wk, nodes);
            acc(rec.wv, d_wv, nodes);
            acc(rec.wo, d_wo, nodes);
            acc(rec.bq, d_bq, nodes);
            acc(rec.bv, d_bv, nodes);
            acc(rec.bo, d_bo, nodes);
        }
        Ok(())
    }
}

/// Weight handles for one attention layer.
#[derive(Clone, Copy)]
pub struct AttnWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub bq: Var,
    pub bv: Var,
    pub bo: Var,
}

fn op_parents(op: &Op) -> Vec<usize> {
    match op {
        Op::Leaf | Op::Const => vec![],
        Op::Linear { x, w, b } => vec![*x, *w, *b],
        Op::Matmul { a, b }
        | Op::Add { a, b }
        | Op::Sub { a, b }
        | Op::Mul { a, b }
        | Op::AddScaled { a, b, .. } => vec![*a, *b],
        Op::Scale { x, .. }
        | Op::Relu { x }
        | Op::Tanh { x }
        | Op::Gelu { x }
        | Op::Exp { x }
        | Op::Square { x }
        | Op::GatherRows { x, .. }
        | Op::RowSum { x }
        | Op::MeanAll { x } => vec![*x],
        Op::TileRows { p, .. } => vec![*p],
        Op::PrependTokens { x, tok_a, tok_b, .. } => vec![*x, *tok_a, *tok_b],
        Op::AddRowVec { x, v } | Op::MulRowVec { x, v } => vec![*x, *v],
        Op::MulColScalar { x, s } => vec![*x, *s],
        Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::Attention(r) => vec![r.q_in, r.kv_in, r.wq, r.wk, r.wv, r.wo, r.bq, r.bv, r.bo],
        Op::ConcatCols { parts } => parts.clone(),
        Op::Embedding { table, .. } => vec![*table],
        Op::Mmd(r) => vec![r.x, r.y],
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut y = x.matmul(w)?;
    for r in 0..y.rows() {
        for (o, &bi) in y.row_mut(r).iter_mut().zip(b.data()) {
            *o += bi;
        }
    }
    Ok(y)
}

fn take_cols(x: &Tensor, start: usize, n: usize) -> Tensor {
    let mut out = Tensor::zeros(x.rows(), n);
    for r in 0..x.rows() {
        out.row_mut(r).copy_from_slice(&x.row(r)[start..start + n]);
    }
    out
}

fn put_cols(dst: &mut Tensor, src: &Tensor, start: usize) {
    for r in 0..src.rows() {
        dst.row_mut(r)[start..start + src.cols()].copy_from_slice(src.row(r));
    }
}

fn put_cols_add(dst: &mut Tensor, src: &Tensor, start: usize) {
    for r in 0..src.rows() {
        let d = &mut dst.row_mut(r)[start..start + src.cols()];
        for (o, &v) in d.iter_mut().zip(src.row(r)) {
            *o += v;
        }
    }
}

fn softmax_rows(x: &mut Tensor) {
    for r in 0..x.rows() {
        let row = x.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

fn col_sums(x: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, x.cols());
    for r in 0..x.rows() {
        for (o, &v) in out.data_mut().iter_mut().zip(x.row(r)) {
            *o += v;
        }
    }
    out
}

/// Squared MMD, biased V-statistic, multi-bandwidth RBF kernel.
pub(crate) fn mmd_value(x: &Tensor, y: &Tensor, bandwidths: &[f64]) -> f64 {
    let (n, m) = (x.rows() as f64, y.rows() as f64);
    let kxx = kernel_sum(x, x, bandwidths) / (n * n);
    let kyy = kernel_sum(y, y, bandwidths) / (m * m);
    let kxy = kernel_sum(x, y, bandwidths) / (n * m);
    kxx + kyy - 2.0 * kxy
}

fn kernel_sum(a: &Tensor, b: &Tensor, bandwidths: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            let d2: f64 = a
                .row(i)
                .iter()
                .zip(b.row(j))
                .map(|(&p, &q)| (p - q) * (p - q))
                .sum();
            for &w in bandwidths {
                total += (-d2 / (2.0 * w * w)).exp();
            }
        }
    }
    total
}

fn mmd_grads(x: &Tensor, y: &Tensor, bandwidths: &[f64]) -> (Tensor, Tensor) {
    let (n, m) = (x.rows() as f64, y.rows() as f64);
    let mut dx = Tensor::zeros(x.rows(), x.cols());
    let mut dy = Tensor::zeros(y.rows(), y.cols());

    // d/da of exp(-|a-b|^2 / (2w^2)) = -k_w(a,b)·(a-b)/w^2
    let pair = |a: &[f64], da: &mut [f64], b: &[f64], db: Option<&mut [f64]>, coef: f64| {
        let d2: f64 = a.iter().zip(b).map(|(&p, &q)| (p - q) * (p - q)).sum();
        let mut kw = 0.0;
        for &w in bandwidths {
            kw += (-d2 / (2.0 * w * w)).exp() / (w * w);
        }
        for (idx, (&av, &bv)) in a.iter().zip(b).enumerate() {
            let g = -coef * kw * (av - bv);
            da[idx] += g;
        }
        if let Some(db) = db {
            for (idx, (&av, &bv)) in a.iter().zip(b).enumerate() {
                db[idx] += coef * kw * (av - bv);
            }
        }
    };

    // d/dx_i of sum_{jl} k(x_j, x_l) = 2·sum_j ∂₁k(x_i, x_j) by kernel symmetry;
    // the ordered loop below visits each pair once with the gradient landing
    // on the first element, so the coefficient carries the factor 2.
    for i in 0..x.rows() {
        for j in 0..x.rows() {
            if i == j {
                continue;
            }
            let (ai, aj) = (x.row(i).to_vec(), x.row(j).to_vec());
            pair(&ai, dx.row_mut(i), &aj, None, 2.0 / (n * n));
        }
    }
    for i in 0..y.rows() {
        for j in 0..y.rows() {
            if i == j {
                continue;
            }
            let (ai, aj) = (y.row(i).to_vec(), y.row(j).to_vec());
            pair(&ai, dy.row_mut(i), &aj, None, 2.0 / (m * m));
        }
    }
    // cross pairs enter the value with -2/(nm); each visit feeds both samples
    for i in 0..x.rows() {
        for j in 0..y.rows() {
            let xi = x.row(i).to_vec();
            let yj = y.row(j).to_vec();
            let dyj = dy.row_mut(j);
            let mut dxi = vec![0.0; xi.len()];
            pair(&xi, &mut dxi, &yj, Some(dyj), -2.0 / (n * m));
            for (o, v) in dx.row_mut(i).iter_mut().zip(dxi) {
                *o += v;
            }
        }
    }
    (dx, dy)
}
