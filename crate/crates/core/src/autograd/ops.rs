use super::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{kernels, Real, Tensor};

impl<S: Real> Graph<S> {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = kernels::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rank() != 2 {
            return Err(Error::shape("transpose", x.shape(), &[0, 0]));
        }
        let value = kernels::transpose(x);
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape(op, x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("add", a, b, |p, q| p + q)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("sub", a, b, |p, q| p - q)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("mul", a, b, |p, q| p * q)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// `x[m×n] + bias[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let n = xv.cols();
        if bv.len() != n {
            return Err(Error::shape("add_row", xv.shape(), bv.shape()));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o = *o + b;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(value, Op::AddRow(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, s: S) -> Var {
        let value = self.value(x).map(|v| v * s);
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale(x, s), rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(kernels::silu);
        let rg = self.rg(&[x]);
        self.push(value, Op::Silu(x), rg)
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let value = kernels::softmax_rows(self.value(x))?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Softmax(x), rg))
    }

    /// Softmax of a matrix along `axis` (0 = columns, 1 = rows).
    pub fn softmax_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        match axis {
            1 => self.softmax(x),
            0 => {
                let t = self.transpose(x)?;
                let s = self.softmax(t)?;
                self.transpose(s)
            }
            _ => Err(Error::Invalid(format!("softmax axis {axis} on a matrix"))),
        }
    }

    /// Sets entries above the diagonal to -inf (square score matrices).
    pub fn causal_mask(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mut data = xv.data().to_vec();
        for i in 0..r {
            for j in (i + 1)..c {
                data[i * c + j] = S::neg_infinity();
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::CausalMask(x), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: S) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let d = xv.cols();
        if gv.len() != d || bv.len() != d {
            return Err(Error::shape("layer_norm", xv.shape(), gv.shape()));
        }
        let n = S::from_usize(d).unwrap();
        let mut out = vec![S::zero(); xv.len()];
        let mut xhat = vec![S::zero(); xv.len()];
        let mut inv_std = Vec::with_capacity(xv.rows());
        for (r, row) in xv.data().chunks(d).enumerate() {
            let mean = row.iter().copied().sum::<S>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
            let inv = S::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if start + len > c {
            return Err(Error::shape("slice_cols", xv.shape(), &[start, len]));
        }
        let mut data = Vec::with_capacity(xv.rows() * len);
        for row in xv.data().chunks(c) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let value = Tensor::new(vec![xv.rows(), len], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rows() != rows {
                return Err(Error::shape("concat_cols", &[rows], pv.shape()));
            }
            total += pv.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::new(vec![rows, total], data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if start + len > xv.rows() {
            return Err(Error::shape("slice_rows", xv.shape(), &[start, len]));
        }
        let data = xv.data()[start * c..(start + len) * c].to_vec();
        let value = Tensor::new(vec![len, c], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SliceRows { x, start }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Invalid("concat_rows of nothing".into()));
        }
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != c {
                return Err(Error::shape("concat_rows", &[c], pv.shape()));
            }
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let value = Tensor::new(vec![rows, c], data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Row gather: `out[i] = x[idx[i]]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= xv.rows() {
                return Err(Error::Index {
                    what: "gather_rows",
                    index: i,
                    len: xv.rows(),
                });
            }
            data.extend_from_slice(xv.row(i));
        }
        let value = Tensor::new(vec![idx.len(), c], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::GatherRows { x, idx: idx.to_vec() }, rg))
    }

    /// Builds a `rows × cols` matrix by adding each part's rows into the
    /// listed destinations. Destinations not covered stay zero.
    pub fn scatter_rows(&mut self, rows: usize, cols: usize, parts: Vec<(Var, Vec<usize>)>) -> Result<Var> {
        let mut data = vec![S::zero(); rows * cols];
        for (p, idx) in &parts {
            let pv = self.value(*p);
            if pv.cols() != cols || pv.rows() != idx.len() {
                return Err(Error::shape("scatter_rows", pv.shape(), &[idx.len(), cols]));
            }
            for (r, &dst) in idx.iter().enumerate() {
                if dst >= rows {
                    return Err(Error::Index {
                        what: "scatter_rows",
                        index: dst,
                        len: rows,
                    });
                }
                for (o, &v) in data[dst * cols..(dst + 1) * cols].iter_mut().zip(pv.row(r)) {
                    *o = *o + v;
                }
            }
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        let inputs: Vec<Var> = parts.iter().map(|(v, _)| *v).collect();
        let rg = self.rg(&inputs);
        Ok(self.push(value, Op::ScatterRows { parts }, rg))
    }

    /// Per-row column gather with `k = idx.len() / rows` picks per row.
    pub fn gather_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if r == 0 || !idx.len().is_multiple_of(r) {
            return Err(Error::shape("gather_cols", xv.shape(), &[idx.len()]));
        }
        let k = idx.len() / r;
        let mut data = Vec::with_capacity(idx.len());
        for t in 0..r {
            for &j in &idx[t * k..(t + 1) * k] {
                if j >= c {
                    return Err(Error::Index {
                        what: "gather_cols",
                        index: j,
                        len: c,
                    });
                }
                data.push(xv.at(t, j));
            }
        }
        let value = Tensor::new(vec![r, k], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::GatherCols { x, idx: idx.to_vec() }, rg))
    }

    /// Divides each row by its sum.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(c) {
            let s: S = row.iter().copied().sum();
            if s == S::zero() {
                return Err(Error::Numeric("normalize_rows: zero row sum".into()));
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::NormalizeRows(x), rg))
    }

    /// Scales row `i` of `x[n×d]` by `w[i]` where `w` is `n×1`.
    pub fn mul_col(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.len() != xv.rows() {
            return Err(Error::shape("mul_col", xv.shape(), wv.shape()));
        }
        let c = xv.cols();
        let mut data = xv.data().to_vec();
        for (row, &s) in data.chunks_mut(c).zip(wv.data()) {
            for v in row.iter_mut() {
                *v = *v * s;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(value, Op::MulCol(x, w), rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: S = self.value(x).data().iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    /// Column means: `[n×m] -> [1×m]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mut data = vec![S::zero(); c];
        for row in xv.data().chunks(c) {
            for (o, &v) in data.iter_mut().zip(row) {
                *o = *o + v;
            }
        }
        let n = S::from_usize(r).unwrap();
        for o in &mut data {
            *o = *o / n;
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new(vec![1, c], data).unwrap(), Op::MeanRows(x), rg)
    }

    /// Mean negative log-likelihood of `targets` under row-softmax of
    /// `logits`; `None` positions are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let lv = self.value(logits);
        let (t, v) = (lv.rows(), lv.cols());
        if targets.len() != t {
            return Err(Error::shape("cross_entropy", lv.shape(), &[targets.len()]));
        }
        let count = targets.iter().filter(|x| x.is_some()).count();
        if count == 0 {
            return Err(Error::Invalid("cross_entropy: every position is ignored".into()));
        }
        let probs = kernels::softmax_rows(lv)?;
        let mut total = S::zero();
        for (r, tgt) in targets.iter().enumerate() {
            let Some(id) = *tgt else { continue };
            if id >= v {
                return Err(Error::Index {
                    what: "cross_entropy target",
                    index: id,
                    len: v,
                });
            }
            let row = lv.row(r);
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<S>().ln();
            total = total + (lse - row[id]);
        }
        let loss = total / S::from_usize(count).unwrap();
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("cross_entropy produced {loss}")));
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    pub(crate) fn propagate(&self, i: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) -> Result<()> {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let ga = kernels::matmul(g, &kernels::transpose(bv))?;
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let gb = kernels::matmul(&kernels::transpose(av), g)?;
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, kernels::transpose(g)),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let d = g.data().iter().zip(bv.data()).map(|(&p, &q)| p * q).collect();
                    self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d)?);
                }
                if self.requires_grad(*b) {
                    let d = g.data().iter().zip(av.data()).map(|(&p, &q)| p * q).collect();
                    self.accumulate(grads, *b, Tensor::new(g.shape().to_vec(), d)?);
                }
            }
            Op::AddRow(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.requires_grad(*b) {
                    let n = g.cols();
                    let mut gb = vec![S::zero(); n];
                    for row in g.data().chunks(n) {
                        for (o, &v) in gb.iter_mut().zip(row) {
                            *o = *o + v;
                        }
                    }
                    let shape = self.value(*b).shape().to_vec();
                    self.accumulate(grads, *b, Tensor::new(shape, gb)?);
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.accumulate(grads, *x, g.map(|v| v * s));
            }
            Op::Silu(x) => {
                let xv = self.value(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&gy, &v)| {
                        let sg = kernels::sigmoid(v);
                        gy * sg * (S::one() + v * (S::one() - sg))
                    })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Softmax(x) => {
                let y = &self.nodes[i].value;
                let c = y.cols();
                let mut d = vec![S::zero(); y.len()];
                for ((drow, yrow), grow) in d.chunks_mut(c).zip(y.data().chunks(c)).zip(g.data().chunks(c)) {
                    let dot: S = yrow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        drow[j] = yrow[j] * (grow[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), d)?);
            }
            Op::CausalMask(x) => {
                let (r, c) = (g.rows(), g.cols());
                let mut d = g.data().to_vec();
                for a in 0..r {
                    for b in (a + 1)..c {
                        d[a * c + b] = S::zero();
                    }
                }
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain);
                let dim = g.cols();
                let n = S::from_usize(dim).unwrap();
                if self.requires_grad(*x) {
                    let mut dx = vec![S::zero(); g.len()];
                    for r in 0..g.rows() {
                        let grow = g.row(r);
                        let hrow = &xhat[r * dim..(r + 1) * dim];
                        let dh: Vec<S> = (0..dim).map(|j| grow[j] * gv.data()[j]).collect();
                        let sum_dh: S = dh.iter().copied().sum();
                        let sum_dh_h: S = dh.iter().zip(hrow).map(|(&a, &b)| a * b).sum();
                        for j in 0..dim {
                            dx[r * dim + j] = inv_std[r] / n * (n * dh[j] - sum_dh - hrow[j] * sum_dh_h);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx)?);
                }
                if self.rg(&[*gain, *bias]) {
                    let mut dg = vec![S::zero(); dim];
                    let mut db = vec![S::zero(); dim];
                    for r in 0..g.rows() {
                        for j in 0..dim {
                            let gy = g.at(r, j);
                            dg[j] = dg[j] + gy * xhat[r * dim + j];
                            db[j] = db[j] + gy;
                        }
                    }
                    let gshape = gv.shape().to_vec();
                    let bshape = self.value(*bias).shape().to_vec();
                    self.accumulate(grads, *gain, Tensor::new(gshape, dg)?);
                    self.accumulate(grads, *bias, Tensor::new(bshape, db)?);
                }
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (c, len) = (xv.cols(), g.cols());
                let mut d = vec![S::zero(); xv.len()];
                for r in 0..xv.rows() {
                    d[r * c + start..r * c + start + len].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d)?);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    if self.requires_grad(p) {
                        let mut d = Vec::with_capacity(g.rows() * pc);
                        for r in 0..g.rows() {
                            d.extend_from_slice(&g.row(r)[off..off + pc]);
                        }
                        self.accumulate(grads, p, Tensor::new(vec![g.rows(), pc], d)?);
                    }
                    off += pc;
                }
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut d = vec![S::zero(); xv.len()];
                d[start * c..start * c + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d)?);
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut off = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let n = pv.rows();
                    if self.requires_grad(p) {
                        let d = g.data()[off * c..(off + n) * c].to_vec();
                        self.accumulate(grads, p, Tensor::new(pv.shape().to_vec(), d)?);
                    }
                    off += n;
                }
            }
            Op::GatherRows { x, idx } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut d = vec![S::zero(); xv.len()];
                for (r, &src) in idx.iter().enumerate() {
                    for (o, &v) in d[src * c..(src + 1) * c].iter_mut().zip(g.row(r)) {
                        *o = *o + v;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d)?);
            }
            Op::ScatterRows { parts } => {
                let c = g.cols();
                for (p, idx) in parts {
                    if !self.requires_grad(*p) {
                        continue;
                    }
                    let mut d = Vec::with_capacity(idx.len() * c);
                    for &dst in idx {
                        d.extend_from_slice(g.row(dst));
                    }
                    self.accumulate(grads, *p, Tensor::new(vec![idx.len(), c], d)?);
                }
            }
            Op::GatherCols { x, idx } => {
                let xv = self.value(*x);
                let (r, c) = (xv.rows(), xv.cols());
                let k = idx.len() / r;
                let mut d = vec![S::zero(); xv.len()];
                for t in 0..r {
                    for s in 0..k {
                        let j = idx[t * k + s];
                        d[t * c + j] = d[t * c + j] + g.at(t, s);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d)?);
            }
            Op::NormalizeRows(x) => {
                // y = x / s, dy/dx_j = (g_j - sum_k g_k y_k) / s
                let xv = self.value(*x);
                let y = &self.nodes[i].value;
                let c = xv.cols();
                let mut d = vec![S::zero(); xv.len()];
                for r in 0..xv.rows() {
                    let s: S = xv.row(r).iter().copied().sum();
                    let dot: S = g.row(r).iter().zip(y.row(r)).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        d[r * c + j] = (g.at(r, j) - dot) / s;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d)?);
            }
            Op::MulCol(x, w) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let c = xv.cols();
                if self.requires_grad(*x) {
                    let mut d = g.data().to_vec();
                    for (row, &s) in d.chunks_mut(c).zip(wv.data()) {
                        for v in row.iter_mut() {
                            *v = *v * s;
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d)?);
                }
                if self.requires_grad(*w) {
                    let d = (0..xv.rows())
                        .map(|r| g.row(r).iter().zip(xv.row(r)).map(|(&a, &b)| a * b).sum())
                        .collect();
                    self.accumulate(grads, *w, Tensor::new(wv.shape().to_vec(), d)?);
                }
            }
            Op::SumAll(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::full(&shape, g.item()));
            }
            Op::MeanRows(x) => {
                let xv = self.value(*x);
                let n = S::from_usize(xv.rows()).unwrap();
                let c = xv.cols();
                let mut d = vec![S::zero(); xv.len()];
                for row in d.chunks_mut(c) {
                    for (o, &v) in row.iter_mut().zip(g.data()) {
                        *o = v / n;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d)?);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let scale = g.item() / S::from_usize(*count).unwrap();
                let c = probs.cols();
                let mut d = vec![S::zero(); probs.len()];
                for (r, tgt) in targets.iter().enumerate() {
                    let Some(id) = *tgt else { continue };
                    for j in 0..c {
                        let onehot = if j == id { S::one() } else { S::zero() };
                        d[r * c + j] = (probs.at(r, j) - onehot) * scale;
                    }
                }
                self.accumulate(grads, *logits, Tensor::new(probs.shape().to_vec(), d)?);
            }
            Op::Custom { inputs, rule } => {
                let outs = rule.backward(g)?;
                if outs.len() != inputs.len() {
                    return Err(Error::Invalid("custom backward arity mismatch".into()));
                }
                for (v, gi) in inputs.iter().zip(outs) {
                    if let Some(gi) = gi {
                        self.accumulate(grads, *v, gi);
                    }
                }
            }
        }
        Ok(())
    }
}
