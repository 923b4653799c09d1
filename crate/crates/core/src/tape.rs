//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] is a write-once list of eagerly evaluated nodes. Operations
//! append a node, compute its value immediately, and return a [`Var`]
//! handle. [`Tape::backward`] walks the list in reverse and accumulates
//! adjoints; leaf gradients are then readable through [`Tape::grad`].
//!
//! The op set is deliberately small: exactly what the generators,
//! discriminators, and contrastive losses in this crate need. Shape
//! mismatches inside the tape are programming errors and panic; user-facing
//! validation happens in the modules that build graphs.

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var, #[allow(dead_code)] f64),
    Scale(Var, f64),
    Exp(Var),
    Ln(Var),
    Ln1p(Var),
    Sqrt(Var),
    Recip(Var),
    Sqr(Var),
    Abs(Var),
    Tanh(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Softplus(Var),
    SumAll(Var),
    MeanAll(Var),
    /// `[n, m] -> [n]`
    SumAxis1(Var),
    /// `[c, h, w] -> [c]`
    MeanHw(Var),
    /// Scale slices along axis 0: `x[i0, ..] * s[i0]`.
    ScaleAxis0(Var, Var),
    /// Scale slices along axis 1: `x[i0, i1, ..] * s[i1]`.
    ScaleAxis1(Var, Var),
    /// Add a per-slice bias along axis 0.
    AddAxis0(Var, Var),
    /// Add a per-slice bias along axis 1 (matrix + row vector).
    AddAxis1(Var, Var),
    /// `[n, k] x [k, m] -> [n, m]`
    MatMul(Var, Var),
    /// `[n, d] x [m, d]^T -> [n, m]`
    MatMulTB(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    /// Transposed convolution; weight layout `[cin, cout, kh, kw]`.
    ConvT2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    Upsample2(Var),
    /// Non-overlapping k x k block average; trailing rows/cols are dropped.
    AvgPoolBlocks(Var, usize),
    ConcatAxis0(Vec<Var>),
    Crop {
        x: Var,
        row: usize,
        col: usize,
        size: usize,
    },
    /// `[c, h, w]` gathered at spatial locations -> `[n, c]`.
    GatherSpatial(Var, Vec<(usize, usize)>),
    /// `[n, n] -> [n]` main diagonal.
    Diag(Var),
    SoftmaxRows(Var),
    /// `[n, m] -> [n]`
    LogSumExpRows(Var),
    Reshape(Var),
    Detach(#[allow(dead_code)] Var),
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    needs_grad: bool,
    op: Op,
}

/// Wengert-list tape. Build a fresh one per forward/backward pass.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, needs_grad: bool, op: Op) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf that participates in differentiation.
    pub fn var(&mut self, shape: &[usize], data: Vec<f64>) -> Var {
        assert_eq!(numel(shape), data.len(), "var data length mismatch");
        self.push(shape.to_vec(), data, true, Op::Leaf)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Var {
        assert_eq!(numel(shape), data.len(), "constant data length mismatch");
        self.push(shape.to_vec(), data, false, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(&[1], vec![v])
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value[0]
    }

    /// Gradient of the last `backward` root with respect to `v`.
    /// Present only for leaves created with [`Tape::var`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    // ---- elementwise ----

    fn binary_same_shape(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "elementwise op on mismatched shapes"
        );
        let value: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.needs(a) || self.needs(b);
        self.push(self.nodes[a.0].shape.clone(), value, ng, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value: Vec<f64> = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        let ng = self.needs(a);
        self.push(self.nodes[a.0].shape.clone(), value, ng, op)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a, c), |x| x + c)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln(a), f64::ln)
    }

    /// `ln(1 + x)`, accurate for small `x`.
    pub fn ln_1p(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln1p(a), f64::ln_1p)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, Op::Recip(a), |x| 1.0 / x)
    }

    pub fn sqr(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqr(a), |x| x * x)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(
            a,
            Op::LeakyRelu(a, slope),
            |x| if x > 0.0 { x } else { slope * x },
        )
    }

    /// Numerically stable `ln(1 + e^x)`.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), |x| x.max(0.0) + (-x.abs()).exp().ln_1p())
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.iter().sum();
        let ng = self.needs(a);
        self.push(vec![1], vec![s], ng, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len();
        let s: f64 = self.nodes[a.0].value.iter().sum();
        let ng = self.needs(a);
        self.push(vec![1], vec![s / n as f64], ng, Op::MeanAll(a))
    }

    pub fn sum_axis1(&mut self, a: Var) -> Var {
        let sh = self.shape(a);
        assert_eq!(sh.len(), 2, "sum_axis1 expects a matrix");
        let (n, m) = (sh[0], sh[1]);
        let v = &self.nodes[a.0].value;
        let out: Vec<f64> = (0..n).map(|i| v[i * m..(i + 1) * m].iter().sum()).collect();
        let ng = self.needs(a);
        self.push(vec![n], out, ng, Op::SumAxis1(a))
    }

    pub fn mean_hw(&mut self, a: Var) -> Var {
        let sh = self.shape(a);
        assert_eq!(sh.len(), 3, "mean_hw expects [c,h,w]");
        let (c, h, w) = (sh[0], sh[1], sh[2]);
        let hw = h * w;
        let v = &self.nodes[a.0].value;
        let out: Vec<f64> = (0..c)
            .map(|ci| v[ci * hw..(ci + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        let ng = self.needs(a);
        self.push(vec![c], out, ng, Op::MeanHw(a))
    }

    // ---- broadcasting along leading axes ----

    pub fn scale_axis0(&mut self, x: Var, s: Var) -> Var {
        let d0 = self.shape(x)[0];
        assert_eq!(self.shape(s), &[d0], "scale_axis0 scale length mismatch");
        let inner = numel(self.shape(x)) / d0;
        let xv = &self.nodes[x.0].value;
        let sv = &self.nodes[s.0].value;
        let mut out = Vec::with_capacity(xv.len());
        for i0 in 0..d0 {
            let f = sv[i0];
            out.extend(xv[i0 * inner..(i0 + 1) * inner].iter().map(|&v| v * f));
        }
        let ng = self.needs(x) || self.needs(s);
        self.push(self.nodes[x.0].shape.clone(), out, ng, Op::ScaleAxis0(x, s))
    }

    pub fn scale_axis1(&mut self, x: Var, s: Var) -> Var {
        let sh = self.shape(x);
        assert!(sh.len() >= 2, "scale_axis1 needs rank >= 2");
        let (d0, d1) = (sh[0], sh[1]);
        assert_eq!(self.shape(s), &[d1], "scale_axis1 scale length mismatch");
        let inner = numel(sh) / (d0 * d1);
        let xv = &self.nodes[x.0].value;
        let sv = &self.nodes[s.0].value;
        let mut out = Vec::with_capacity(xv.len());
        for i0 in 0..d0 {
            for i1 in 0..d1 {
                let f = sv[i1];
                let base = (i0 * d1 + i1) * inner;
                out.extend(xv[base..base + inner].iter().map(|&v| v * f));
            }
        }
        let ng = self.needs(x) || self.needs(s);
        self.push(self.nodes[x.0].shape.clone(), out, ng, Op::ScaleAxis1(x, s))
    }

    pub fn add_axis0(&mut self, x: Var, b: Var) -> Var {
        let d0 = self.shape(x)[0];
        assert_eq!(self.shape(b), &[d0], "add_axis0 bias length mismatch");
        let inner = numel(self.shape(x)) / d0;
        let xv = &self.nodes[x.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = Vec::with_capacity(xv.len());
        for i0 in 0..d0 {
            let c = bv[i0];
            out.extend(xv[i0 * inner..(i0 + 1) * inner].iter().map(|&v| v + c));
        }
        let ng = self.needs(x) || self.needs(b);
        self.push(self.nodes[x.0].shape.clone(), out, ng, Op::AddAxis0(x, b))
    }

    pub fn add_axis1(&mut self, x: Var, b: Var) -> Var {
        let sh = self.shape(x);
        assert_eq!(sh.len(), 2, "add_axis1 expects a matrix");
        let (n, m) = (sh[0], sh[1]);
        assert_eq!(self.shape(b), &[m], "add_axis1 bias length mismatch");
        let xv = &self.nodes[x.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = Vec::with_capacity(xv.len());
        for i in 0..n {
            out.extend(xv[i * m..(i + 1) * m].iter().zip(bv).map(|(&v, &c)| v + c));
        }
        let ng = self.needs(x) || self.needs(b);
        self.push(self.nodes[x.0].shape.clone(), out, ng, Op::AddAxis1(x, b))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa.len(), 2);
        assert_eq!(sb.len(), 2);
        assert_eq!(sa[1], sb[0], "matmul inner dims differ");
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let out = matmul_kernel(av, bv, n, k, m);
        let ng = self.needs(a) || self.needs(b);
        self.push(vec![n, m], out, ng, Op::MatMul(a, b))
    }

    /// `a @ b^T` for row-feature matrices; handy for similarity matrices.
    pub fn matmul_tb(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa.len(), 2);
        assert_eq!(sb.len(), 2);
        assert_eq!(sa[1], sb[1], "matmul_tb feature dims differ");
        let (n, d, m) = (sa[0], sa[1], sb[0]);
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let ai = &av[i * d..(i + 1) * d];
            for j in 0..m {
                let bj = &bv[j * d..(j + 1) * d];
                out[i * m + j] = dot(ai, bj);
            }
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(vec![n, m], out, ng, Op::MatMulTB(a, b))
    }

    // ---- convolution ----

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        assert_eq!(sx.len(), 3, "conv2d input must be [c,h,w]");
        assert_eq!(sw.len(), 4, "conv2d weight must be [co,ci,kh,kw]");
        assert_eq!(sx[0], sw[1], "conv2d channel mismatch");
        let (ci, h, wd) = (sx[0], sx[1], sx[2]);
        let (co, kh, kw) = (sw[0], sw[2], sw[3]);
        let out = conv2d_fwd(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            ci,
            h,
            wd,
            co,
            kh,
            kw,
            stride,
            pad,
        );
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let ng = self.needs(x) || self.needs(w);
        self.push(vec![co, ho, wo], out, ng, Op::Conv2d { x, w, stride, pad })
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        assert_eq!(sx.len(), 3, "conv_transpose2d input must be [c,h,w]");
        assert_eq!(sw.len(), 4, "conv_transpose2d weight must be [ci,co,kh,kw]");
        assert_eq!(sx[0], sw[0], "conv_transpose2d channel mismatch");
        let (ci, h, wd) = (sx[0], sx[1], sx[2]);
        let (co, kh, kw) = (sw[1], sw[2], sw[3]);
        let out = convt2d_fwd(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            ci,
            h,
            wd,
            co,
            kh,
            kw,
            stride,
            pad,
        );
        let ho = (h - 1) * stride + kh - 2 * pad;
        let wo = (wd - 1) * stride + kw - 2 * pad;
        let ng = self.needs(x) || self.needs(w);
        self.push(vec![co, ho, wo], out, ng, Op::ConvT2d { x, w, stride, pad })
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let sh = self.shape(x);
        assert_eq!(sh.len(), 3);
        let (c, h, w) = (sh[0], sh[1], sh[2]);
        let v = &self.nodes[x.0].value;
        let mut out = vec![0.0; c * 4 * h * w];
        for ci in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(ci * 2 * h + y) * 2 * w + xx] = v[(ci * h + y / 2) * w + xx / 2];
                }
            }
        }
        let ng = self.needs(x);
        self.push(vec![c, 2 * h, 2 * w], out, ng, Op::Upsample2(x))
    }

    pub fn avg_pool_blocks(&mut self, x: Var, k: usize) -> Var {
        let sh = self.shape(x);
        assert_eq!(sh.len(), 3);
        assert!(k >= 1);
        let (c, h, w) = (sh[0], sh[1], sh[2]);
        let (ho, wo) = (h / k, w / k);
        assert!(ho >= 1 && wo >= 1, "avg_pool_blocks output would be empty");
        let v = &self.nodes[x.0].value;
        let mut out = vec![0.0; c * ho * wo];
        let inv = 1.0 / (k * k) as f64;
        for ci in 0..c {
            for by in 0..ho {
                for bx in 0..wo {
                    let mut s = 0.0;
                    for dy in 0..k {
                        for dx in 0..k {
                            s += v[(ci * h + by * k + dy) * w + bx * k + dx];
                        }
                    }
                    out[(ci * ho + by) * wo + bx] = s * inv;
                }
            }
        }
        let ng = self.needs(x);
        self.push(vec![c, ho, wo], out, ng, Op::AvgPoolBlocks(x, k))
    }

    // ---- structural ----

    pub fn concat_axis0(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut d0 = 0;
        for &p in parts {
            assert_eq!(&self.shape(p)[1..], &tail[..], "concat_axis0 tail mismatch");
            d0 += self.shape(p)[0];
        }
        let mut out = Vec::with_capacity(d0 * tail.iter().product::<usize>().max(1));
        for &p in parts {
            out.extend_from_slice(&self.nodes[p.0].value);
        }
        let mut shape = vec![d0];
        shape.extend_from_slice(&tail);
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(shape, out, ng, Op::ConcatAxis0(parts.to_vec()))
    }

    pub fn crop(&mut self, x: Var, row: usize, col: usize, size: usize) -> Var {
        let sh = self.shape(x);
        assert_eq!(sh.len(), 3);
        let (c, h, w) = (sh[0], sh[1], sh[2]);
        assert!(row + size <= h && col + size <= w, "crop out of bounds");
        let v = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(c * size * size);
        for ci in 0..c {
            for y in 0..size {
                let base = (ci * h + row + y) * w + col;
                out.extend_from_slice(&v[base..base + size]);
            }
        }
        let ng = self.needs(x);
        self.push(vec![c, size, size], out, ng, Op::Crop { x, row, col, size })
    }

    pub fn gather_spatial(&mut self, x: Var, locs: &[(usize, usize)]) -> Var {
        let sh = self.shape(x);
        assert_eq!(sh.len(), 3);
        let (c, h, w) = (sh[0], sh[1], sh[2]);
        for &(r, cc) in locs {
            assert!(r < h && cc < w, "gather_spatial out of bounds");
        }
        let v = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(locs.len() * c);
        for &(r, cc) in locs {
            for ci in 0..c {
                out.push(v[(ci * h + r) * w + cc]);
            }
        }
        let ng = self.needs(x);
        self.push(
            vec![locs.len(), c],
            out,
            ng,
            Op::GatherSpatial(x, locs.to_vec()),
        )
    }

    pub fn diag(&mut self, x: Var) -> Var {
        let sh = self.shape(x);
        assert_eq!(sh.len(), 2);
        assert_eq!(sh[0], sh[1], "diag expects a square matrix");
        let n = sh[0];
        let v = &self.nodes[x.0].value;
        let out: Vec<f64> = (0..n).map(|i| v[i * n + i]).collect();
        let ng = self.needs(x);
        self.push(vec![n], out, ng, Op::Diag(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let sh = self.shape(x);
        assert_eq!(sh.len(), 2);
        let (n, m) = (sh[0], sh[1]);
        let v = &self.nodes[x.0].value;
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &v[i * m..(i + 1) * m];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for j in 0..m {
                let e = (row[j] - mx).exp();
                out[i * m + j] = e;
                s += e;
            }
            for j in 0..m {
                out[i * m + j] /= s;
            }
        }
        let ng = self.needs(x);
        self.push(vec![n, m], out, ng, Op::SoftmaxRows(x))
    }

    pub fn logsumexp_rows(&mut self, x: Var) -> Var {
        let sh = self.shape(x);
        assert_eq!(sh.len(), 2);
        let (n, m) = (sh[0], sh[1]);
        let v = &self.nodes[x.0].value;
        // The max entry contributes exp(0) = 1 exactly; routing the rest
        // through ln_1p keeps lse(x) - max(x) strictly positive down to
        // exp underflow instead of rounding at 1 + 1e-16.
        let out: Vec<f64> = (0..n)
            .map(|i| {
                let row = &v[i * m..(i + 1) * m];
                let mut jmax = 0;
                for j in 1..m {
                    if row[j] > row[jmax] {
                        jmax = j;
                    }
                }
                let mx = row[jmax];
                let rest: f64 = row
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != jmax)
                    .map(|(_, &x)| (x - mx).exp())
                    .sum();
                mx + rest.ln_1p()
            })
            .collect();
        let ng = self.needs(x);
        self.push(vec![n], out, ng, Op::LogSumExpRows(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        assert_eq!(
            numel(self.shape(x)),
            numel(shape),
            "reshape changes element count"
        );
        let value = self.nodes[x.0].value.clone();
        let ng = self.needs(x);
        self.push(shape.to_vec(), value, ng, Op::Reshape(x))
    }

    /// Identity in value, barrier for gradients.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.push(self.nodes[x.0].shape.clone(), value, false, Op::Detach(x))
    }

    // ---- backward ----

    /// Accumulates gradients of scalar `root` into every grad-tracked leaf.
    pub fn backward(&mut self, root: Var) {
        assert_eq!(
            self.nodes[root.0].value.len(),
            1,
            "backward root must be scalar"
        );
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].needs_grad {
                grads[idx] = None;
                continue;
            }
            let g = match &grads[idx] {
                Some(_) => {
                    if matches!(self.nodes[idx].op, Op::Leaf) {
                        continue; // keep leaf grads for querying
                    }
                    grads[idx].take().unwrap()
                }
                None => continue,
            };
            self.propagate(idx, &g, &mut grads);
        }
        self.grads = grads;
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        // Lazily allocates the parent's grad buffer and applies `f` to it.
        macro_rules! acc {
            ($p:expr, $f:expr) => {
                if self.nodes[$p.0].needs_grad {
                    let buf = grads[$p.0]
                        .get_or_insert_with(|| vec![0.0; self.nodes[$p.0].value.len()]);
                    #[allow(clippy::redundant_closure_call)]
                    ($f)(buf.as_mut_slice());
                }
            };
        }
        let val = |v: Var| -> &[f64] { &self.nodes[v.0].value };

        match &node.op {
            Op::Leaf | Op::Detach(_) => {}
            Op::Add(a, b) => {
                acc!(a, |ga: &mut [f64]| axpy(ga, g, 1.0));
                acc!(b, |gb: &mut [f64]| axpy(gb, g, 1.0));
            }
            Op::Sub(a, b) => {
                acc!(a, |ga: &mut [f64]| axpy(ga, g, 1.0));
                acc!(b, |gb: &mut [f64]| axpy(gb, g, -1.0));
            }
            Op::Mul(a, b) => {
                acc!(a, |ga: &mut [f64]| for i in 0..g.len() {
                    ga[i] += g[i] * val(*b)[i];
                });
                acc!(b, |gb: &mut [f64]| for i in 0..g.len() {
                    gb[i] += g[i] * val(*a)[i];
                });
            }
            Op::AddScalar(a, _) => acc!(a, |ga: &mut [f64]| axpy(ga, g, 1.0)),
            Op::Scale(a, c) => acc!(a, |ga: &mut [f64]| axpy(ga, g, *c)),
            Op::Exp(a) => acc!(a, |ga: &mut [f64]| for i in 0..g.len() {
                ga[i] += g[i] * node.value[i];
            }),
            Op::Ln(a) => acc!(a, |ga: &mut [f64]| for i in 0..g.len() {
                ga[i] += g[i] / val(*a)[i];
            }),
            Op::Ln1p(a) => acc!(a, |ga: &mut [f64]| for i in 0..g.len() {
                ga[i] += g[i] / (1.0 + val(*a)[i]);
            }),
            Op::Sqrt(a) => acc!(a, |ga: &mut [f64]| for i in 0..g.len() {
                ga[i] += g[i] * 0.5 / node.value[i];
            }),
            Op::Recip(a) => acc!(a, |ga: &mut [f64]| for i in 0..g.len() {
                ga[i] -= g[i] * node.value[i] * node.value[i];
            }),
            Op::Sqr(a) => acc!(a, |ga: &mut [f64]| for i in 0..g.len() {
                ga[i] += g[i] * 2.0 * val(*a)[i];
            }),
            Op::Abs(a) => acc!(a, |ga: &mut [f64]| for i in 0..g.len() {
                let x = val(*a)[i];
                ga[i] += g[i] * if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 };
            }),
            Op::Tanh(a) => acc!(a, |ga: &mut [f64]| for i in 0..g.len() {
                ga[i] += g[i] * (1.0 - node.value[i] * node.value[i]);
            }),
            Op::Relu(a) => acc!(a, |ga: &mut [f64]| for i in 0..g.len() {
                if val(*a)[i] > 0.0 {
                    ga[i] += g[i];
                }
            }),
            Op::LeakyRelu(a, slope) => acc!(a, |ga: &mut [f64]| for i in 0..g.len() {
                ga[i] += g[i] * if val(*a)[i] > 0.0 { 1.0 } else { *slope };
            }),
            Op::Softplus(a) => acc!(a, |ga: &mut [f64]| for i in 0..g.len() {
                let x = val(*a)[i];
                ga[i] += g[i] / (1.0 + (-x).exp());
            }),
            Op::SumAll(a) => acc!(a, |ga: &mut [f64]| for v in ga.iter_mut() {
                *v += g[0];
            }),
            Op::MeanAll(a) => {
                let inv = 1.0 / self.nodes[a.0].value.len() as f64;
                acc!(a, |ga: &mut [f64]| for v in ga.iter_mut() {
                    *v += g[0] * inv;
                });
            }
            Op::SumAxis1(a) => {
                let m = self.nodes[a.0].shape[1];
                acc!(a, |ga: &mut [f64]| for (i, &gi) in g.iter().enumerate() {
                    for v in ga[i * m..(i + 1) * m].iter_mut() {
                        *v += gi;
                    }
                });
            }
            Op::MeanHw(a) => {
                let sh = &self.nodes[a.0].shape;
                let hw = sh[1] * sh[2];
                let inv = 1.0 / hw as f64;
                acc!(a, |ga: &mut [f64]| for (ci, &gi) in g.iter().enumerate() {
                    for v in ga[ci * hw..(ci + 1) * hw].iter_mut() {
                        *v += gi * inv;
                    }
                });
            }
            Op::ScaleAxis0(x, s) => {
                let d0 = self.nodes[x.0].shape[0];
                let inner = self.nodes[x.0].value.len() / d0;
                acc!(x, |gx: &mut [f64]| for i0 in 0..d0 {
                    let f = val(*s)[i0];
                    for i in 0..inner {
                        gx[i0 * inner + i] += g[i0 * inner + i] * f;
                    }
                });
                acc!(s, |gs: &mut [f64]| for i0 in 0..d0 {
                    let mut acc = 0.0;
                    for i in 0..inner {
                        acc += g[i0 * inner + i] * val(*x)[i0 * inner + i];
                    }
                    gs[i0] += acc;
                });
            }
            Op::ScaleAxis1(x, s) => {
                let sh = &self.nodes[x.0].shape;
                let (d0, d1) = (sh[0], sh[1]);
                let inner = self.nodes[x.0].value.len() / (d0 * d1);
                acc!(x, |gx: &mut [f64]| for i0 in 0..d0 {
                    for i1 in 0..d1 {
                        let f = val(*s)[i1];
                        let base = (i0 * d1 + i1) * inner;
                        for i in 0..inner {
                            gx[base + i] += g[base + i] * f;
                        }
                    }
                });
                acc!(s, |gs: &mut [f64]| for i0 in 0..d0 {
                    for i1 in 0..d1 {
                        let base = (i0 * d1 + i1) * inner;
                        let mut acc = 0.0;
                        for i in 0..inner {
                            acc += g[base + i] * val(*x)[base + i];
                        }
                        gs[i1] += acc;
                    }
                });
            }
            Op::AddAxis0(x, b) => {
                let d0 = self.nodes[x.0].shape[0];
                let inner = self.nodes[x.0].value.len() / d0;
                acc!(x, |gx: &mut [f64]| axpy(gx, g, 1.0));
                acc!(b, |gb: &mut [f64]| for i0 in 0..d0 {
                    gb[i0] += g[i0 * inner..(i0 + 1) * inner].iter().sum::<f64>();
                });
            }
            Op::AddAxis1(x, b) => {
                let sh = &self.nodes[x.0].shape;
                let (n, m) = (sh[0], sh[1]);
                acc!(x, |gx: &mut [f64]| axpy(gx, g, 1.0));
                acc!(b, |gb: &mut [f64]| for i in 0..n {
                    for j in 0..m {
                        gb[j] += g[i * m + j];
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (n, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let m = self.nodes[b.0].shape[1];
                // dA = g @ B^T
                acc!(a, |ga: &mut [f64]| {
                    for i in 0..n {
                        for kk in 0..k {
                            ga[i * k + kk] += dot(&g[i * m..(i + 1) * m], &matrow(val(*b), kk, m));
                        }
                    }
                });
                // dB = A^T @ g
                acc!(b, |gb: &mut [f64]| {
                    for kk in 0..k {
                        for i in 0..n {
                            let aik = val(*a)[i * k + kk];
                            if aik != 0.0 {
                                for j in 0..m {
                                    gb[kk * m + j] += aik * g[i * m + j];
                                }
                            }
                        }
                    }
                });
            }
            Op::MatMulTB(a, b) => {
                let (n, d) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let m = self.nodes[b.0].shape[0];
                // out = A B^T : dA = G @ B, dB = G^T @ A
                acc!(a, |ga: &mut [f64]| for i in 0..n {
                    for j in 0..m {
                        let gij = g[i * m + j];
                        if gij != 0.0 {
                            for t in 0..d {
                                ga[i * d + t] += gij * val(*b)[j * d + t];
                            }
                        }
                    }
                });
                acc!(b, |gb: &mut [f64]| for j in 0..m {
                    for i in 0..n {
                        let gij = g[i * m + j];
                        if gij != 0.0 {
                            for t in 0..d {
                                gb[j * d + t] += gij * val(*a)[i * d + t];
                            }
                        }
                    }
                });
            }
            Op::Conv2d { x, w, stride, pad } => {
                let sx = &self.nodes[x.0].shape;
                let sw = &self.nodes[w.0].shape;
                let (ci, h, wd) = (sx[0], sx[1], sx[2]);
                let (co, kh, kw) = (sw[0], sw[2], sw[3]);
                acc!(x, |gx: &mut [f64]| conv2d_bwd_x(
                    g,
                    val(*w),
                    gx,
                    ci,
                    h,
                    wd,
                    co,
                    kh,
                    kw,
                    *stride,
                    *pad
                ));
                acc!(w, |gw: &mut [f64]| conv2d_bwd_w(
                    g,
                    val(*x),
                    gw,
                    ci,
                    h,
                    wd,
                    co,
                    kh,
                    kw,
                    *stride,
                    *pad
                ));
            }
            Op::ConvT2d { x, w, stride, pad } => {
                let sx = &self.nodes[x.0].shape;
                let sw = &self.nodes[w.0].shape;
                let (ci, h, wd) = (sx[0], sx[1], sx[2]);
                let (co, kh, kw) = (sw[1], sw[2], sw[3]);
                acc!(x, |gx: &mut [f64]| convt2d_bwd_x(
                    g,
                    val(*w),
                    gx,
                    ci,
                    h,
                    wd,
                    co,
                    kh,
                    kw,
                    *stride,
                    *pad
                ));
                acc!(w, |gw: &mut [f64]| convt2d_bwd_w(
                    g,
                    val(*x),
                    gw,
                    ci,
                    h,
                    wd,
                    co,
                    kh,
                    kw,
                    *stride,
                    *pad
                ));
            }
            Op::Upsample2(x) => {
                let sh = &self.nodes[x.0].shape;
                let (c, h, w) = (sh[0], sh[1], sh[2]);
                acc!(x, |gx: &mut [f64]| for ci in 0..c {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            gx[(ci * h + y / 2) * w + xx / 2] += g[(ci * 2 * h + y) * 2 * w + xx];
                        }
                    }
                });
            }
            Op::AvgPoolBlocks(x, k) => {
                let sh = &self.nodes[x.0].shape;
                let (c, h, w) = (sh[0], sh[1], sh[2]);
                let (ho, wo) = (h / k, w / k);
                let inv = 1.0 / (k * k) as f64;
                acc!(x, |gx: &mut [f64]| for ci in 0..c {
                    for by in 0..ho {
                        for bx in 0..wo {
                            let gv = g[(ci * ho + by) * wo + bx] * inv;
                            for dy in 0..*k {
                                for dx in 0..*k {
                                    gx[(ci * h + by * k + dy) * w + bx * k + dx] += gv;
                                }
                            }
                        }
                    }
                });
            }
            Op::ConcatAxis0(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.len();
                    acc!(p, |gp: &mut [f64]| axpy(gp, &g[offset..offset + len], 1.0));
                    offset += len;
                }
            }
            Op::Crop { x, row, col, size } => {
                let sh = &self.nodes[x.0].shape;
                let (c, h, w) = (sh[0], sh[1], sh[2]);
                acc!(x, |gx: &mut [f64]| for ci in 0..c {
                    for y in 0..*size {
                        for xx in 0..*size {
                            gx[(ci * h + row + y) * w + col + xx] +=
                                g[(ci * size + y) * size + xx];
                        }
                    }
                });
            }
            Op::GatherSpatial(x, locs) => {
                let sh = &self.nodes[x.0].shape;
                let (c, h, w) = (sh[0], sh[1], sh[2]);
                acc!(x, |gx: &mut [f64]| for (n, &(r, cc)) in locs.iter().enumerate() {
                    for ci in 0..c {
                        gx[(ci * h + r) * w + cc] += g[n * c + ci];
                    }
                });
            }
            Op::Diag(x) => {
                let n = self.nodes[x.0].shape[0];
                acc!(x, |gx: &mut [f64]| for i in 0..n {
                    gx[i * n + i] += g[i];
                });
            }
            Op::SoftmaxRows(x) => {
                let sh = &self.nodes[x.0].shape;
                let (n, m) = (sh[0], sh[1]);
                acc!(x, |gx: &mut [f64]| for i in 0..n {
                    let s = &node.value[i * m..(i + 1) * m];
                    let gr = &g[i * m..(i + 1) * m];
                    let gd = dot(gr, s);
                    for j in 0..m {
                        gx[i * m + j] += s[j] * (gr[j] - gd);
                    }
                });
            }
            Op::LogSumExpRows(x) => {
                let sh = &self.nodes[x.0].shape;
                let (n, m) = (sh[0], sh[1]);
                acc!(x, |gx: &mut [f64]| for i in 0..n {
                    let row = &val(*x)[i * m..(i + 1) * m];
                    let lse = node.value[i];
                    for j in 0..m {
                        gx[i * m + j] += g[i] * (row[j] - lse).exp();
                    }
                });
            }
            Op::Reshape(x) => acc!(x, |gx: &mut [f64]| axpy(gx, g, 1.0)),
        }
    }
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    debug_assert_eq!(dst.len(), src.len());
    for i in 0..dst.len() {
        dst[i] += a * src[i];
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn matrow(m: &[f64], row: usize, cols: usize) -> Vec<f64> {
    m[row * cols..(row + 1) * cols].to_vec()
}

fn matmul_kernel(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik != 0.0 {
                let brow = &b[kk * m..(kk + 1) * m];
                let orow = &mut out[i * m..(i + 1) * m];
                for j in 0..m {
                    orow[j] += aik * brow[j];
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_fwd(
    x: &[f64],
    w: &[f64],
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; co * ho * wo];
    for o in 0..co {
        for c in 0..ci {
            let wbase = ((o * ci + c) * kh) * kw;
            let xbase = c * h * wd;
            for oy in 0..ho {
                let iy0 = (oy * stride) as isize - pad as isize;
                for ky in 0..kh {
                    let iy = iy0 + ky as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = xbase + iy as usize * wd;
                    let wrow = wbase + ky * kw;
                    let orow = (o * ho + oy) * wo;
                    for ox in 0..wo {
                        let ix0 = (ox * stride) as isize - pad as isize;
                        let mut acc = 0.0;
                        for kx in 0..kw {
                            let ix = ix0 + kx as isize;
                            if ix >= 0 && ix < wd as isize {
                                acc += x[xrow + ix as usize] * w[wrow + kx];
                            }
                        }
                        out[orow + ox] += acc;
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_bwd_x(
    g: &[f64],
    w: &[f64],
    gx: &mut [f64],
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) {
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    for o in 0..co {
        for c in 0..ci {
            let wbase = ((o * ci + c) * kh) * kw;
            for oy in 0..ho {
                let iy0 = (oy * stride) as isize - pad as isize;
                for ky in 0..kh {
                    let iy = iy0 + ky as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = c * h * wd + iy as usize * wd;
                    let wrow = wbase + ky * kw;
                    let orow = (o * ho + oy) * wo;
                    for ox in 0..wo {
                        let gv = g[orow + ox];
                        if gv == 0.0 {
                            continue;
                        }
                        let ix0 = (ox * stride) as isize - pad as isize;
                        for kx in 0..kw {
                            let ix = ix0 + kx as isize;
                            if ix >= 0 && ix < wd as isize {
                                gx[xrow + ix as usize] += gv * w[wrow + kx];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_bwd_w(
    g: &[f64],
    x: &[f64],
    gw: &mut [f64],
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) {
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    for o in 0..co {
        for c in 0..ci {
            let wbase = ((o * ci + c) * kh) * kw;
            for oy in 0..ho {
                let iy0 = (oy * stride) as isize - pad as isize;
                for ky in 0..kh {
                    let iy = iy0 + ky as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = c * h * wd + iy as usize * wd;
                    let wrow = wbase + ky * kw;
                    let orow = (o * ho + oy) * wo;
                    for ox in 0..wo {
                        let gv = g[orow + ox];
                        if gv == 0.0 {
                            continue;
                        }
                        let ix0 = (ox * stride) as isize - pad as isize;
                        for kx in 0..kw {
                            let ix = ix0 + kx as isize;
                            if ix >= 0 && ix < wd as isize {
                                gw[wrow + kx] += gv * x[xrow + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn convt2d_fwd(
    x: &[f64],
    w: &[f64],
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let ho = (h - 1) * stride + kh - 2 * pad;
    let wo = (wd - 1) * stride + kw - 2 * pad;
    let mut out = vec![0.0; co * ho * wo];
    for c in 0..ci {
        for o in 0..co {
            let wbase = ((c * co + o) * kh) * kw;
            for i in 0..h {
                for p in 0..kh {
                    let oy = (i * stride + p) as isize - pad as isize;
                    if oy < 0 || oy >= ho as isize {
                        continue;
                    }
                    let xrow = c * h * wd + i * wd;
                    let wrow = wbase + p * kw;
                    let orow = (o * ho + oy as usize) * wo;
                    for j in 0..wd {
                        let xv = x[xrow + j];
                        if xv == 0.0 {
                            continue;
                        }
                        for q in 0..kw {
                            let ox = (j * stride + q) as isize - pad as isize;
                            if ox >= 0 && ox < wo as isize {
                                out[orow + ox as usize] += xv * w[wrow + q];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn convt2d_bwd_x(
    g: &[f64],
    w: &[f64],
    gx: &mut [f64],
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) {
    let ho = (h - 1) * stride + kh - 2 * pad;
    let wo = (wd - 1) * stride + kw - 2 * pad;
    for c in 0..ci {
        for o in 0..co {
            let wbase = ((c * co + o) * kh) * kw;
            for i in 0..h {
                for p in 0..kh {
                    let oy = (i * stride + p) as isize - pad as isize;
                    if oy < 0 || oy >= ho as isize {
                        continue;
                    }
                    let xrow = c * h * wd + i * wd;
                    let wrow = wbase + p * kw;
                    let orow = (o * ho + oy as usize) * wo;
                    for j in 0..wd {
                        let mut acc = 0.0;
                        for q in 0..kw {
                            let ox = (j * stride + q) as isize - pad as isize;
                            if ox >= 0 && ox < wo as isize {
                                acc += g[orow + ox as usize] * w[wrow + q];
                            }
                        }
                        gx[xrow + j] += acc;
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn convt2d_bwd_w(
    g: &[f64],
    x: &[f64],
    gw: &mut [f64],
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) {
    let ho = (h - 1) * stride + kh - 2 * pad;
    let wo = (wd - 1) * stride + kw - 2 * pad;
    for c in 0..ci {
        for o in 0..co {
            let wbase = ((c * co + o) * kh) * kw;
            for i in 0..h {
                for p in 0..kh {
                    let oy = (i * stride + p) as isize - pad as isize;
                    if oy < 0 || oy >= ho as isize {
                        continue;
                    }
                    let xrow = c * h * wd + i * wd;
                    let wrow = wbase + p * kw;
                    let orow = (o * ho + oy as usize) * wo;
                    for j in 0..wd {
                        let xv = x[xrow + j];
                        if xv == 0.0 {
                            continue;
                        }
                        for q in 0..kw {
                            let ox = (j * stride + q) as isize - pad as isize;
                            if ox >= 0 && ox < wo as isize {
                                gw[wrow + q] += xv * g[orow + ox as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}
