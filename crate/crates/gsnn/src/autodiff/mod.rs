//! Minimal reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records one computation as a flat list of nodes; every op pushes
//! one node with its parents and enough context to replay the local backward
//! rule. Backward walks the list once in reverse. Tensors are row-major
//! `Vec<f64>` with up to four axes; the heavyweight sheaf operations are fused
//! ops (one node per Laplacian application) rather than compositions of tiny
//! matmuls.
//!
//! A tape instance is confined to one thread.

mod optim;
pub mod sinkhorn;

pub use optim::{grad_check, Adam, DecayGroup, Param, ParamSet};

use std::cell::RefCell;
use std::rc::Rc;

use nalgebra::DMatrix;

use crate::graph::Graph;
use crate::{Error, Result};

/// Handle into a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor(usize);

/// Graph structure shared by the fused sheaf ops.
#[derive(Debug)]
pub struct SheafCtx {
    pub n: usize,
    pub d: usize,
    pub edges: Vec<(usize, usize)>,
}

impl SheafCtx {
    pub fn from_graph(graph: &Graph, d: usize) -> Rc<Self> {
        Rc::new(Self {
            n: graph.node_count(),
            d,
            edges: graph.edges().to_vec(),
        })
    }
}

pub(crate) struct SinkhornRecord {
    pub eps: f64,
    pub cost: Vec<f64>,
    pub f_hist: Vec<Vec<f64>>,
    pub g_hist: Vec<Vec<f64>>,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Mul(usize, usize),
    Sum(usize),
    MeanList(Vec<usize>),
    Matmul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Affine { x: usize, w: usize, b: usize },
    Elu(usize),
    Relu(usize),
    Tanh(usize),
    Softplus(usize),
    Exp(usize),
    SliceCols { x: usize, from: usize, to: usize },
    SliceBatch { x: usize, index: usize },
    Congruence { a: usize, s: usize },
    EmbedMean { w: usize, means: Vec<f64>, n: usize, s_dim: usize },
    EmbedCov { w: usize, covs: Vec<f64>, n: usize, s_dim: usize },
    KronApply { w: usize, x: usize, d: usize },
    ChannelMixCov { s: usize, w: usize },
    DegInvSqrt { maps: usize, ctx: Rc<SheafCtx> },
    NormalizeMaps { maps: usize, dis: usize, ctx: Rc<SheafCtx> },
    SheafMeanApply { maps: usize, x: usize, ctx: Rc<SheafCtx> },
    SheafCovApply { maps: usize, s: usize, ctx: Rc<SheafCtx> },
    NodePairGather { x: usize, ctx: Rc<SheafCtx> },
    Cayley { p: usize, d: usize },
    DiagEmbed { p: usize },
    GeneralMaps { p: usize },
    EigenSqrt { s: usize },
    CholeskyJitter { s: usize },
    Reparam { mean: usize, root: usize, z: Vec<f64>, t: usize },
    ReparamDiag { mean: usize, std: usize, z: Vec<f64>, t: usize },
    AdjProp { x: usize, a: Rc<Vec<f64>>, n: usize },
    RowScale { x: usize, s: usize },
    Sinkhorn { x: usize, y: usize, record: Option<Box<SinkhornRecord>> },
}

struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Records one forward computation and replays it backward.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Accumulated gradients from one backward pass, indexed by tensor.
pub struct Grads(Vec<Option<Vec<f64>>>);

impl Grads {
    pub fn get(&self, t: Tensor) -> Option<&[f64]> {
        self.0[t.0].as_deref()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    pub fn shape(&self, t: Tensor) -> Vec<usize> {
        self.nodes.borrow()[t.0].shape.clone()
    }

    pub fn value(&self, t: Tensor) -> Vec<f64> {
        self.nodes.borrow()[t.0].values.clone()
    }

    pub fn scalar(&self, t: Tensor) -> f64 {
        let nodes = self.nodes.borrow();
        debug_assert_eq!(nodes[t.0].values.len(), 1);
        nodes[t.0].values[0]
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.nodes.borrow()[t.0].requires_grad
    }

    fn push(&self, shape: Vec<usize>, values: Vec<f64>, op: Op, requires_grad: bool) -> Tensor {
        debug_assert_eq!(numel(&shape), values.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            values,
            op,
            requires_grad,
        });
        Tensor(nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    pub fn leaf(&self, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> Tensor {
        self.push(shape, values, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, shape: Vec<usize>, values: Vec<f64>) -> Tensor {
        self.leaf(shape, values, false)
    }

    pub fn constant_scalar(&self, v: f64) -> Tensor {
        self.leaf(vec![1], vec![v], false)
    }

    // -- elementwise ---------------------------------------------------------

    pub fn add(&self, a: Tensor, b: Tensor) -> Tensor {
        let (sa, out) = {
            let nodes = self.nodes.borrow();
            assert_eq!(nodes[a.0].shape, nodes[b.0].shape, "add: shape mismatch");
            let out = nodes[a.0]
                .values
                .iter()
                .zip(&nodes[b.0].values)
                .map(|(x, y)| x + y)
                .collect();
            (nodes[a.0].shape.clone(), out)
        };
        let rg = self.any_grad(&[a.0, b.0]);
        self.push(sa, out, Op::Add(a.0, b.0), rg)
    }

    pub fn sub(&self, a: Tensor, b: Tensor) -> Tensor {
        let (sa, out) = {
            let nodes = self.nodes.borrow();
            assert_eq!(nodes[a.0].shape, nodes[b.0].shape, "sub: shape mismatch");
            let out = nodes[a.0]
                .values
                .iter()
                .zip(&nodes[b.0].values)
                .map(|(x, y)| x - y)
                .collect();
            (nodes[a.0].shape.clone(), out)
        };
        let rg = self.any_grad(&[a.0, b.0]);
        self.push(sa, out, Op::Sub(a.0, b.0), rg)
    }

    pub fn neg(&self, a: Tensor) -> Tensor {
        let (sa, out) = {
            let nodes = self.nodes.borrow();
            (
                nodes[a.0].shape.clone(),
                nodes[a.0].values.iter().map(|x| -x).collect(),
            )
        };
        let rg = self.any_grad(&[a.0]);
        self.push(sa, out, Op::Neg(a.0), rg)
    }

    pub fn scale(&self, a: Tensor, c: f64) -> Tensor {
        let (sa, out) = {
            let nodes = self.nodes.borrow();
            (
                nodes[a.0].shape.clone(),
                nodes[a.0].values.iter().map(|x| c * x).collect(),
            )
        };
        let rg = self.any_grad(&[a.0]);
        self.push(sa, out, Op::Scale(a.0, c), rg)
    }

    pub fn add_scalar(&self, a: Tensor, c: f64) -> Tensor {
        let (sa, out) = {
            let nodes = self.nodes.borrow();
            (
                nodes[a.0].shape.clone(),
                nodes[a.0].values.iter().map(|x| x + c).collect(),
            )
        };
        let rg = self.any_grad(&[a.0]);
        self.push(sa, out, Op::AddScalar(a.0), rg)
    }

    pub fn mul(&self, a: Tensor, b: Tensor) -> Tensor {
        let (sa, out) = {
            let nodes = self.nodes.borrow();
            assert_eq!(nodes[a.0].shape, nodes[b.0].shape, "mul: shape mismatch");
            let out = nodes[a.0]
                .values
                .iter()
                .zip(&nodes[b.0].values)
                .map(|(x, y)| x * y)
                .collect();
            (nodes[a.0].shape.clone(), out)
        };
        let rg = self.any_grad(&[a.0, b.0]);
        self.push(sa, out, Op::Mul(a.0, b.0), rg)
    }

    pub fn sum(&self, a: Tensor) -> Tensor {
        let total: f64 = self.nodes.borrow()[a.0].values.iter().sum();
        let rg = self.any_grad(&[a.0]);
        self.push(vec![1], vec![total], Op::Sum(a.0), rg)
    }

    /// Arithmetic mean of scalar tensors.
    pub fn mean_of(&self, items: &[Tensor]) -> Tensor {
        assert!(!items.is_empty(), "mean_of: empty list");
        let ids: Vec<usize> = items.iter().map(|t| t.0).collect();
        let total: f64 = {
            let nodes = self.nodes.borrow();
            ids.iter()
                .map(|&i| {
                    debug_assert_eq!(nodes[i].values.len(), 1);
                    nodes[i].values[0]
                })
                .sum()
        };
        let rg = self.any_grad(&ids);
        self.push(
            vec![1],
            vec![total / items.len() as f64],
            Op::MeanList(ids),
            rg,
        )
    }

    pub fn elu(&self, a: Tensor) -> Tensor {
        let (sa, out) = {
            let nodes = self.nodes.borrow();
            let out = nodes[a.0]
                .values
                .iter()
                .map(|&x| if x > 0.0 { x } else { x.exp() - 1.0 })
                .collect();
            (nodes[a.0].shape.clone(), out)
        };
        let rg = self.any_grad(&[a.0]);
        self.push(sa, out, Op::Elu(a.0), rg)
    }

    pub fn relu(&self, a: Tensor) -> Tensor {
        let (sa, out) = {
            let nodes = self.nodes.borrow();
            let out = nodes[a.0].values.iter().map(|&x| x.max(0.0)).collect();
            (nodes[a.0].shape.clone(), out)
        };
        let rg = self.any_grad(&[a.0]);
        self.push(sa, out, Op::Relu(a.0), rg)
    }

    pub fn tanh(&self, a: Tensor) -> Tensor {
        let (sa, out) = {
            let nodes = self.nodes.borrow();
            (
                nodes[a.0].shape.clone(),
                nodes[a.0].values.iter().map(|x| x.tanh()).collect(),
            )
        };
        let rg = self.any_grad(&[a.0]);
        self.push(sa, out, Op::Tanh(a.0), rg)
    }

    pub fn softplus(&self, a: Tensor) -> Tensor {
        let (sa, out) = {
            let nodes = self.nodes.borrow();
            let out = nodes[a.0]
                .values
                .iter()
                .map(|&x| x.max(0.0) + (-x.abs()).exp().ln_1p())
                .collect();
            (nodes[a.0].shape.clone(), out)
        };
        let rg = self.any_grad(&[a.0]);
        self.push(sa, out, Op::Softplus(a.0), rg)
    }

    pub fn exp(&self, a: Tensor) -> Tensor {
        let (sa, out) = {
            let nodes = self.nodes.borrow();
            (
                nodes[a.0].shape.clone(),
                nodes[a.0].values.iter().map(|x| x.exp()).collect(),
            )
        };
        let rg = self.any_grad(&[a.0]);
        self.push(sa, out, Op::Exp(a.0), rg)
    }

    // -- linear algebra ------------------------------------------------------

    pub fn matmul(&self, a: Tensor, b: Tensor) -> Tensor {
        let (m, k, n, out) = {
            let nodes = self.nodes.borrow();
            let sa = &nodes[a.0].shape;
            let sb = &nodes[b.0].shape;
            assert_eq!(sa.len(), 2, "matmul lhs must be 2-D");
            assert_eq!(sb.len(), 2, "matmul rhs must be 2-D");
            assert_eq!(sa[1], sb[0], "matmul: inner dims differ");
            let out = mat_mul(&nodes[a.0].values, &nodes[b.0].values, sa[0], sa[1], sb[1]);
            (sa[0], sa[1], sb[1], out)
        };
        let _ = k;
        let rg = self.any_grad(&[a.0, b.0]);
        self.push(vec![m, n], out, Op::Matmul(a.0, b.0), rg)
    }

    pub fn transpose(&self, a: Tensor) -> Tensor {
        let (m, n, out) = {
            let nodes = self.nodes.borrow();
            let sa = &nodes[a.0].shape;
            assert_eq!(sa.len(), 2, "transpose needs a 2-D tensor");
            let (m, n) = (sa[0], sa[1]);
            let va = &nodes[a.0].values;
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = va[i * n + j];
                }
            }
            (m, n, out)
        };
        let rg = self.any_grad(&[a.0]);
        self.push(vec![n, m], out, Op::Transpose(a.0), rg)
    }

    pub fn reshape(&self, a: Tensor, shape: Vec<usize>) -> Tensor {
        let va = {
            let nodes = self.nodes.borrow();
            assert_eq!(
                numel(&shape),
                nodes[a.0].values.len(),
                "reshape: size mismatch"
            );
            nodes[a.0].values.clone()
        };
        let rg = self.any_grad(&[a.0]);
        self.push(shape, va, Op::Reshape(a.0), rg)
    }

    /// `y = x wᵀ + b` with `x: (B, in)`, `w: (out, in)`, `b: (out)`.
    pub fn affine(&self, x: Tensor, w: Tensor, b: Tensor) -> Tensor {
        let (bs, dout, out) = {
            let nodes = self.nodes.borrow();
            let sx = &nodes[x.0].shape;
            let sw = &nodes[w.0].shape;
            let sb = &nodes[b.0].shape;
            assert_eq!(sx.len(), 2, "affine input must be 2-D");
            assert_eq!(sw.len(), 2, "affine weight must be 2-D");
            assert_eq!(sx[1], sw[1], "affine: in-dim mismatch");
            assert_eq!(sb, &vec![sw[0]], "affine: bias shape");
            let (bs, din, dout) = (sx[0], sx[1], sw[0]);
            let vx = &nodes[x.0].values;
            let vw = &nodes[w.0].values;
            let vb = &nodes[b.0].values;
            let mut out = vec![0.0; bs * dout];
            for r in 0..bs {
                for o in 0..dout {
                    let mut acc = vb[o];
                    for i in 0..din {
                        acc += vx[r * din + i] * vw[o * din + i];
                    }
                    out[r * dout + o] = acc;
                }
            }
            (bs, dout, out)
        };
        let rg = self.any_grad(&[x.0, w.0, b.0]);
        self.push(
            vec![bs, dout],
            out,
            Op::Affine {
                x: x.0,
                w: w.0,
                b: b.0,
            },
            rg,
        )
    }

    pub fn slice_cols(&self, x: Tensor, from: usize, to: usize) -> Tensor {
        let (rows, out) = {
            let nodes = self.nodes.borrow();
            let sx = &nodes[x.0].shape;
            assert_eq!(sx.len(), 2);
            assert!(from < to && to <= sx[1]);
            let (rows, cols) = (sx[0], sx[1]);
            let vx = &nodes[x.0].values;
            let width = to - from;
            let mut out = vec![0.0; rows * width];
            for r in 0..rows {
                out[r * width..(r + 1) * width]
                    .copy_from_slice(&vx[r * cols + from..r * cols + to]);
            }
            (rows, out)
        };
        let rg = self.any_grad(&[x.0]);
        self.push(
            vec![rows, to - from],
            out,
            Op::SliceCols { x: x.0, from, to },
            rg,
        )
    }

    /// Extracts batch element `index`, dropping the leading axis.
    pub fn slice_batch(&self, x: Tensor, index: usize) -> Tensor {
        let (rest_shape, out) = {
            let nodes = self.nodes.borrow();
            let sx = &nodes[x.0].shape;
            assert!(sx.len() >= 2, "slice_batch needs a leading batch axis");
            assert!(index < sx[0]);
            let rest: Vec<usize> = sx[1..].to_vec();
            let chunk = numel(&rest);
            let out = nodes[x.0].values[index * chunk..(index + 1) * chunk].to_vec();
            (rest, out)
        };
        let rg = self.any_grad(&[x.0]);
        self.push(rest_shape, out, Op::SliceBatch { x: x.0, index }, rg)
    }

    /// Batched congruence `A S_b Aᵀ` over the trailing `(d, d)` axes of `s`.
    pub fn congruence(&self, a: Tensor, s: Tensor) -> Tensor {
        let (shape, out) = {
            let nodes = self.nodes.borrow();
            let sa = &nodes[a.0].shape;
            let ss = &nodes[s.0].shape;
            assert_eq!(sa.len(), 2);
            assert_eq!(sa[0], sa[1], "congruence map must be square");
            let d = sa[0];
            assert!(ss.len() >= 2);
            assert_eq!(&ss[ss.len() - 2..], &[d, d], "congruence: block mismatch");
            let batch = numel(&ss[..ss.len() - 2]);
            let va = &nodes[a.0].values;
            let vs = &nodes[s.0].values;
            let mut out = vec![0.0; vs.len()];
            for b in 0..batch {
                let blk = &vs[b * d * d..(b + 1) * d * d];
                let tmp = mat_mul(va, blk, d, d, d);
                let res = mat_mul_nt(&tmp, va, d, d, d);
                out[b * d * d..(b + 1) * d * d].copy_from_slice(&res);
            }
            (ss.clone(), out)
        };
        let rg = self.any_grad(&[a.0, s.0]);
        self.push(shape, out, Op::Congruence { a: a.0, s: s.0 }, rg)
    }

    /// Stalk embedding of means: `w: (h, d, s)`, constant `means: (n, s)`,
    /// out `(n*d, h)` with `out[v*d + i, c] = Σ_j w[c, i, j] means[v, j]`.
    pub fn embed_mean(&self, w: Tensor, means: &[f64], n: usize, s_dim: usize) -> Tensor {
        let (h, d, out) = {
            let nodes = self.nodes.borrow();
            let sw = &nodes[w.0].shape;
            assert_eq!(sw.len(), 3);
            assert_eq!(sw[2], s_dim);
            assert_eq!(means.len(), n * s_dim);
            let (h, d) = (sw[0], sw[1]);
            let vw = &nodes[w.0].values;
            let mut out = vec![0.0; n * d * h];
            for v in 0..n {
                for c in 0..h {
                    for i in 0..d {
                        let mut acc = 0.0;
                        for j in 0..s_dim {
                            acc += vw[(c * d + i) * s_dim + j] * means[v * s_dim + j];
                        }
                        out[(v * d + i) * h + c] = acc;
                    }
                }
            }
            (h, d, out)
        };
        let rg = self.any_grad(&[w.0]);
        self.push(
            vec![n * d, h],
            out,
            Op::EmbedMean {
                w: w.0,
                means: means.to_vec(),
                n,
                s_dim,
            },
            rg,
        )
    }

    /// Stalk embedding of covariances: per node and channel `W_c Σ_v W_cᵀ`,
    /// out `(n, h, d, d)`.
    pub fn embed_cov(&self, w: Tensor, covs: &[f64], n: usize, s_dim: usize) -> Tensor {
        let (h, d, out) = {
            let nodes = self.nodes.borrow();
            let sw = &nodes[w.0].shape;
            assert_eq!(sw.len(), 3);
            assert_eq!(sw[2], s_dim);
            assert_eq!(covs.len(), n * s_dim * s_dim);
            let (h, d) = (sw[0], sw[1]);
            let vw = &nodes[w.0].values;
            let mut out = vec![0.0; n * h * d * d];
            for v in 0..n {
                let sig = &covs[v * s_dim * s_dim..(v + 1) * s_dim * s_dim];
                for c in 0..h {
                    let wc = &vw[c * d * s_dim..(c + 1) * d * s_dim];
                    let tmp = mat_mul(wc, sig, d, s_dim, s_dim);
                    let res = mat_mul_nt(&tmp, wc, d, s_dim, d);
                    out[(v * h + c) * d * d..(v * h + c + 1) * d * d].copy_from_slice(&res);
                }
            }
            (h, d, out)
        };
        let rg = self.any_grad(&[w.0]);
        self.push(
            vec![n, h, d, d],
            out,
            Op::EmbedCov {
                w: w.0,
                covs: covs.to_vec(),
                n,
                s_dim,
            },
            rg,
        )
    }

    /// Block-diagonal left multiplication `(I ⊗ W) x` with `x: (n*d, h)`.
    pub fn kron_apply(&self, w: Tensor, x: Tensor) -> Tensor {
        let (d, rows, h, out) = {
            let nodes = self.nodes.borrow();
            let sw = &nodes[w.0].shape;
            let sx = &nodes[x.0].shape;
            assert_eq!(sw.len(), 2);
            assert_eq!(sw[0], sw[1]);
            assert_eq!(sx.len(), 2);
            assert_eq!(sx[0] % sw[0], 0, "kron_apply: rows not a multiple of d");
            let (d, rows, h) = (sw[0], sx[0], sx[1]);
            let n = rows / d;
            let vw = &nodes[w.0].values;
            let vx = &nodes[x.0].values;
            let mut out = vec![0.0; rows * h];
            for v in 0..n {
                let blk = &vx[v * d * h..(v + 1) * d * h];
                let res = mat_mul(vw, blk, d, d, h);
                out[v * d * h..(v + 1) * d * h].copy_from_slice(&res);
            }
            (d, rows, h, out)
        };
        let rg = self.any_grad(&[w.0, x.0]);
        self.push(
            vec![rows, h],
            out,
            Op::KronApply { w: w.0, x: x.0, d },
            rg,
        )
    }

    /// Channel mixing of covariance blocks: `out[v, c'] = Σ_c s[v, c] w[c, c']`.
    pub fn channel_mix_cov(&self, s: Tensor, w: Tensor) -> Tensor {
        let (n, d, h_out, out) = {
            let nodes = self.nodes.borrow();
            let ss = &nodes[s.0].shape;
            let sw = &nodes[w.0].shape;
            assert_eq!(ss.len(), 4);
            assert_eq!(sw.len(), 2);
            assert_eq!(ss[1], sw[0], "channel_mix_cov: channel count mismatch");
            let (n, h, d, h_out) = (ss[0], ss[1], ss[2], sw[1]);
            let dd = d * d;
            let vs = &nodes[s.0].values;
            let vw = &nodes[w.0].values;
            let mut out = vec![0.0; n * h_out * dd];
            for v in 0..n {
                for co in 0..h_out {
                    let dst = &mut out[(v * h_out + co) * dd..(v * h_out + co + 1) * dd];
                    for c in 0..h {
                        let wgt = vw[c * h_out + co];
                        if wgt == 0.0 {
                            continue;
                        }
                        let src = &vs[(v * h + c) * dd..(v * h + c + 1) * dd];
                        for (dv, sv) in dst.iter_mut().zip(src) {
                            *dv += wgt * sv;
                        }
                    }
                }
            }
            (n, d, h_out, out)
        };
        let rg = self.any_grad(&[s.0, w.0]);
        self.push(
            vec![n, h_out, d, d],
            out,
            Op::ChannelMixCov { s: s.0, w: w.0 },
            rg,
        )
    }

    /// Degree blocks `D_v = Σ FᵀF` of a map tensor `(E, 2, d, d)`, returned as
    /// their pseudo-inverse square roots `(n, d, d)`.
    pub fn deg_inv_sqrt(&self, maps: Tensor, ctx: &Rc<SheafCtx>) -> Tensor {
        let out = {
            let nodes = self.nodes.borrow();
            let sm = &nodes[maps.0].shape;
            assert_eq!(sm, &vec![ctx.edges.len(), 2, ctx.d, ctx.d]);
            let d = ctx.d;
            let deg = degree_blocks(&nodes[maps.0].values, ctx);
            let mut out = vec![0.0; ctx.n * d * d];
            for v in 0..ctx.n {
                let blk = psd_inv_sqrt_block(&deg[v * d * d..(v + 1) * d * d], d);
                out[v * d * d..(v + 1) * d * d].copy_from_slice(&blk);
            }
            out
        };
        let rg = self.any_grad(&[maps.0]);
        self.push(
            vec![ctx.n, ctx.d, ctx.d],
            out,
            Op::DegInvSqrt {
                maps: maps.0,
                ctx: Rc::clone(ctx),
            },
            rg,
        )
    }

    /// Right-scales every incidence map by its node's block:
    /// `nF_{v⊴e} = F_{v⊴e} dis_v`.
    pub fn normalize_maps(&self, maps: Tensor, dis: Tensor, ctx: &Rc<SheafCtx>) -> Tensor {
        let out = {
            let nodes = self.nodes.borrow();
            let vm = &nodes[maps.0].values;
            let vd = &nodes[dis.0].values;
            let d = ctx.d;
            let dd = d * d;
            let mut out = vec![0.0; vm.len()];
            for (e, &(u, v)) in ctx.edges.iter().enumerate() {
                for (side, node) in [(0usize, u), (1usize, v)] {
                    let f = &vm[(e * 2 + side) * dd..(e * 2 + side + 1) * dd];
                    let s = &vd[node * dd..(node + 1) * dd];
                    out[(e * 2 + side) * dd..(e * 2 + side + 1) * dd]
                        .copy_from_slice(&mat_mul(f, s, d, d, d));
                }
            }
            out
        };
        let rg = self.any_grad(&[maps.0, dis.0]);
        self.push(
            vec![ctx.edges.len(), 2, ctx.d, ctx.d],
            out,
            Op::NormalizeMaps {
                maps: maps.0,
                dis: dis.0,
                ctx: Rc::clone(ctx),
            },
            rg,
        )
    }

    /// Mean Laplacian application with the given (possibly normalized) maps:
    /// `y_v = Σ_e Fᵀ(F_v x_v − F_u x_u)`.
    pub fn sheaf_mean_apply(&self, maps: Tensor, x: Tensor, ctx: &Rc<SheafCtx>) -> Tensor {
        let (h, out) = {
            let nodes = self.nodes.borrow();
            let sx = &nodes[x.0].shape;
            assert_eq!(sx.len(), 2);
            assert_eq!(sx[0], ctx.n * ctx.d, "sheaf_mean_apply: row mismatch");
            let h = sx[1];
            (
                h,
                sheaf_mean_forward(&nodes[maps.0].values, &nodes[x.0].values, h, ctx),
            )
        };
        let rg = self.any_grad(&[maps.0, x.0]);
        self.push(
            vec![ctx.n * ctx.d, h],
            out,
            Op::SheafMeanApply {
                maps: maps.0,
                x: x.0,
                ctx: Rc::clone(ctx),
            },
            rg,
        )
    }

    /// Covariance Laplacian application with the given maps:
    /// `y_v = Σ_e Fᵀ(F_u Σ_u F_uᵀ + F_v Σ_v F_vᵀ) F` per channel.
    pub fn sheaf_cov_apply(&self, maps: Tensor, s: Tensor, ctx: &Rc<SheafCtx>) -> Tensor {
        let (h, out) = {
            let nodes = self.nodes.borrow();
            let ss = &nodes[s.0].shape;
            assert_eq!(ss.len(), 4);
            assert_eq!(ss[0], ctx.n);
            assert_eq!(&ss[2..], &[ctx.d, ctx.d]);
            let h = ss[1];
            (
                h,
                sheaf_cov_forward(&nodes[maps.0].values, &nodes[s.0].values, h, ctx),
            )
        };
        let rg = self.any_grad(&[maps.0, s.0]);
        self.push(
            vec![ctx.n, h, ctx.d, ctx.d],
            out,
            Op::SheafCovApply {
                maps: maps.0,
                s: s.0,
                ctx: Rc::clone(ctx),
            },
            rg,
        )
    }

    /// Per-incidence feature rows from node features: for every edge `(u, v)`
    /// emits `[x̄_u ‖ x̄_v]` then `[x̄_v ‖ x̄_u]`, where `x̄` is the channel
    /// mean of a node's stalk block. Output `(2E, 2d)`.
    pub fn node_pair_gather(&self, x: Tensor, ctx: &Rc<SheafCtx>) -> Tensor {
        let out = {
            let nodes = self.nodes.borrow();
            let sx = &nodes[x.0].shape;
            assert_eq!(sx.len(), 2);
            assert_eq!(sx[0], ctx.n * ctx.d);
            let h = sx[1];
            let d = ctx.d;
            let vx = &nodes[x.0].values;
            let mut bar = vec![0.0; ctx.n * d];
            for v in 0..ctx.n {
                for i in 0..d {
                    let row = &vx[(v * d + i) * h..(v * d + i + 1) * h];
                    bar[v * d + i] = row.iter().sum::<f64>() / h as f64;
                }
            }
            let mut out = vec![0.0; ctx.edges.len() * 2 * 2 * d];
            for (e, &(u, v)) in ctx.edges.iter().enumerate() {
                let row0 = &mut out[(e * 2) * 2 * d..(e * 2 + 1) * 2 * d];
                row0[..d].copy_from_slice(&bar[u * d..(u + 1) * d]);
                row0[d..].copy_from_slice(&bar[v * d..(v + 1) * d]);
                let row1 = &mut out[(e * 2 + 1) * 2 * d..(e * 2 + 2) * 2 * d];
                row1[..d].copy_from_slice(&bar[v * d..(v + 1) * d]);
                row1[d..].copy_from_slice(&bar[u * d..(u + 1) * d]);
            }
            out
        };
        let rg = self.any_grad(&[x.0]);
        self.push(
            vec![ctx.edges.len() * 2, 2 * ctx.d],
            out,
            Op::NodePairGather {
                x: x.0,
                ctx: Rc::clone(ctx),
            },
            rg,
        )
    }

    /// Cayley transform of skew parameters: rows of `p` hold the strict upper
    /// triangle (lexicographic), output `(N, d, d)` orthogonal matrices
    /// `(I − S)⁻¹(I + S)`.
    pub fn cayley(&self, p: Tensor, d: usize) -> Tensor {
        let (batch, out) = {
            let nodes = self.nodes.borrow();
            let sp = &nodes[p.0].shape;
            assert_eq!(sp.len(), 2);
            assert_eq!(sp[1], d * (d - 1) / 2, "cayley: wrong parameter count");
            let (batch, k) = (sp[0], sp[1]);
            let vp = &nodes[p.0].values;
            let mut out = vec![0.0; batch * d * d];
            for b in 0..batch {
                let m = cayley_forward(&vp[b * k..(b + 1) * k], d);
                out[b * d * d..(b + 1) * d * d].copy_from_slice(&m);
            }
            (batch, out)
        };
        let rg = self.any_grad(&[p.0]);
        self.push(vec![batch, d, d], out, Op::Cayley { p: p.0, d }, rg)
    }

    /// Diagonal matrices from rows of `p: (N, d)`.
    pub fn diag_embed(&self, p: Tensor) -> Tensor {
        let (batch, d, out) = {
            let nodes = self.nodes.borrow();
            let sp = &nodes[p.0].shape;
            assert_eq!(sp.len(), 2);
            let (batch, d) = (sp[0], sp[1]);
            let vp = &nodes[p.0].values;
            let mut out = vec![0.0; batch * d * d];
            for b in 0..batch {
                for i in 0..d {
                    out[b * d * d + i * d + i] = vp[b * d + i];
                }
            }
            (batch, d, out)
        };
        let rg = self.any_grad(&[p.0]);
        self.push(vec![batch, d, d], out, Op::DiagEmbed { p: p.0 }, rg)
    }

    /// Unconstrained maps from rows of `p: (N, d*d)` plus `ridge * I` to bias
    /// them toward invertibility.
    pub fn general_maps(&self, p: Tensor, d: usize, ridge: f64) -> Tensor {
        let (batch, out) = {
            let nodes = self.nodes.borrow();
            let sp = &nodes[p.0].shape;
            assert_eq!(sp.len(), 2);
            assert_eq!(sp[1], d * d);
            let batch = sp[0];
            let mut out = nodes[p.0].values.clone();
            for b in 0..batch {
                for i in 0..d {
                    out[b * d * d + i * d + i] += ridge;
                }
            }
            (batch, out)
        };
        let rg = self.any_grad(&[p.0]);
        self.push(vec![batch, d, d], out, Op::GeneralMaps { p: p.0 }, rg)
    }

    /// Batched symmetric PSD square root over trailing `(d, d)` blocks.
    pub fn eigen_sqrt(&self, s: Tensor) -> Tensor {
        let (shape, out) = {
            let nodes = self.nodes.borrow();
            let ss = &nodes[s.0].shape;
            assert!(ss.len() >= 2);
            let d = ss[ss.len() - 1];
            assert_eq!(ss[ss.len() - 2], d);
            let batch = numel(&ss[..ss.len() - 2]);
            let vs = &nodes[s.0].values;
            let mut out = vec![0.0; vs.len()];
            for b in 0..batch {
                let blk = psd_sqrt_block(&vs[b * d * d..(b + 1) * d * d], d);
                out[b * d * d..(b + 1) * d * d].copy_from_slice(&blk);
            }
            (ss.clone(), out)
        };
        let rg = self.any_grad(&[s.0]);
        self.push(shape, out, Op::EigenSqrt { s: s.0 }, rg)
    }

    /// Batched lower Cholesky factor of `S + jitter I`, with the jitter
    /// escalating `1e-9 → ×10 → 1e-3` until the factorization succeeds.
    pub fn cholesky_jitter(&self, s: Tensor) -> Result<Tensor> {
        let (shape, out) = {
            let nodes = self.nodes.borrow();
            let ss = &nodes[s.0].shape;
            assert!(ss.len() >= 2);
            let d = ss[ss.len() - 1];
            assert_eq!(ss[ss.len() - 2], d);
            let batch = numel(&ss[..ss.len() - 2]);
            let vs = &nodes[s.0].values;
            let mut out = vec![0.0; vs.len()];
            let mut ladder = vec![0.0];
            let mut j = 1e-9;
            while j <= 1.0001e-3 {
                ladder.push(j);
                j *= 10.0;
            }
            for b in 0..batch {
                let blk = &vs[b * d * d..(b + 1) * d * d];
                let mut done = false;
                for &jit in &ladder {
                    // operate on the symmetric part, matching the eigen ops
                    let mut m = vec![0.0; d * d];
                    for i in 0..d {
                        for j in 0..d {
                            m[i * d + j] = 0.5 * (blk[i * d + j] + blk[j * d + i]);
                        }
                        m[i * d + i] += jit;
                    }
                    if let Some(l) = cholesky_block(&m, d) {
                        out[b * d * d..(b + 1) * d * d].copy_from_slice(&l);
                        done = true;
                        break;
                    }
                }
                if !done {
                    return Err(Error::Factorization(format!(
                        "block {b} is not positive definite even with 1e-3 jitter"
                    )));
                }
            }
            (ss.clone(), out)
        };
        let rg = self.any_grad(&[s.0]);
        Ok(self.push(shape, out, Op::CholeskyJitter { s: s.0 }, rg))
    }

    /// Reparameterized sampling `x[v, t] = mean[v] + root[v] z[v, t]` with
    /// fixed noise `z: (n, t, d)`.
    pub fn reparam(&self, mean: Tensor, root: Tensor, z: &[f64], t: usize) -> Tensor {
        let (n, d, out) = {
            let nodes = self.nodes.borrow();
            let sm = &nodes[mean.0].shape;
            let sr = &nodes[root.0].shape;
            assert_eq!(sm.len(), 2);
            let (n, d) = (sm[0], sm[1]);
            assert_eq!(sr, &vec![n, d, d]);
            assert_eq!(z.len(), n * t * d);
            let vm = &nodes[mean.0].values;
            let vr = &nodes[root.0].values;
            let mut out = vec![0.0; n * t * d];
            for v in 0..n {
                let r = &vr[v * d * d..(v + 1) * d * d];
                for s in 0..t {
                    let zrow = &z[(v * t + s) * d..(v * t + s + 1) * d];
                    let dst = &mut out[(v * t + s) * d..(v * t + s + 1) * d];
                    for i in 0..d {
                        let mut acc = vm[v * d + i];
                        for j in 0..d {
                            acc += r[i * d + j] * zrow[j];
                        }
                        dst[i] = acc;
                    }
                }
            }
            (n, d, out)
        };
        let rg = self.any_grad(&[mean.0, root.0]);
        self.push(
            vec![n, t, d],
            out,
            Op::Reparam {
                mean: mean.0,
                root: root.0,
                z: z.to_vec(),
                t,
            },
            rg,
        )
    }

    /// Diagonal reparameterization `x[v, t] = mean[v] + std[v] ∘ z[v, t]`.
    pub fn reparam_diag(&self, mean: Tensor, std: Tensor, z: &[f64], t: usize) -> Tensor {
        let (n, d, out) = {
            let nodes = self.nodes.borrow();
            let sm = &nodes[mean.0].shape;
            assert_eq!(sm.len(), 2);
            assert_eq!(sm, &nodes[std.0].shape);
            let (n, d) = (sm[0], sm[1]);
            assert_eq!(z.len(), n * t * d);
            let vm = &nodes[mean.0].values;
            let vsd = &nodes[std.0].values;
            let mut out = vec![0.0; n * t * d];
            for v in 0..n {
                for s in 0..t {
                    for i in 0..d {
                        out[(v * t + s) * d + i] =
                            vm[v * d + i] + vsd[v * d + i] * z[(v * t + s) * d + i];
                    }
                }
            }
            (n, d, out)
        };
        let rg = self.any_grad(&[mean.0, std.0]);
        self.push(
            vec![n, t, d],
            out,
            Op::ReparamDiag {
                mean: mean.0,
                std: std.0,
                z: z.to_vec(),
                t,
            },
            rg,
        )
    }

    /// Applies a constant `n x n` matrix to every batch slice of `x: (T, n, f)`.
    pub fn adj_prop(&self, x: Tensor, a: &Rc<Vec<f64>>, n: usize) -> Tensor {
        let (t, f, out) = {
            let nodes = self.nodes.borrow();
            let sx = &nodes[x.0].shape;
            assert_eq!(sx.len(), 3);
            assert_eq!(sx[1], n);
            assert_eq!(a.len(), n * n);
            let (t, f) = (sx[0], sx[2]);
            let vx = &nodes[x.0].values;
            let mut out = vec![0.0; t * n * f];
            for b in 0..t {
                let blk = &vx[b * n * f..(b + 1) * n * f];
                out[b * n * f..(b + 1) * n * f].copy_from_slice(&mat_mul(a, blk, n, n, f));
            }
            (t, f, out)
        };
        let rg = self.any_grad(&[x.0]);
        self.push(
            vec![t, n, f],
            out,
            Op::AdjProp {
                x: x.0,
                a: Rc::clone(a),
                n,
            },
            rg,
        )
    }

    /// Multiplies row `r` of `x: (R, C)` by `s[r]`.
    pub fn row_scale(&self, x: Tensor, s: Tensor) -> Tensor {
        let (r, c, out) = {
            let nodes = self.nodes.borrow();
            let sx = &nodes[x.0].shape;
            let ss = &nodes[s.0].shape;
            assert_eq!(sx.len(), 2);
            assert_eq!(ss, &vec![sx[0]], "row_scale: scale must be (rows,)");
            let (r, c) = (sx[0], sx[1]);
            let vx = &nodes[x.0].values;
            let vs = &nodes[s.0].values;
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[i * c + j] = vx[i * c + j] * vs[i];
                }
            }
            (r, c, out)
        };
        let rg = self.any_grad(&[x.0, s.0]);
        self.push(vec![r, c], out, Op::RowScale { x: x.0, s: s.0 }, rg)
    }

    /// Entropic squared 2-Wasserstein estimate between sample sets
    /// `x: (T, k)` and `y: (S, k)` with uniform marginals and squared
    /// Euclidean cost, by fixed-iteration log-domain scaling.
    ///
    /// `eps = None` uses 0.1 times the median pairwise squared distance.
    /// The gradient unrolls the iterations.
    pub fn sinkhorn_w2(
        &self,
        x: Tensor,
        y: Tensor,
        eps: Option<f64>,
        iters: usize,
    ) -> Result<Tensor> {
        if iters == 0 {
            return Err(Error::Parameter(
                "sinkhorn needs at least 1 iteration".into(),
            ));
        }
        let (t_n, s_n, k) = {
            let nodes = self.nodes.borrow();
            let sx = &nodes[x.0].shape;
            let sy = &nodes[y.0].shape;
            assert_eq!(sx.len(), 2);
            assert_eq!(sy.len(), 2);
            if sx[1] != sy[1] {
                return Err(Error::Shape("sinkhorn: sample dims differ".into()));
            }
            (sx[0], sy[0], sx[1])
        };
        let (vx, vy) = {
            let nodes = self.nodes.borrow();
            (nodes[x.0].values.clone(), nodes[y.0].values.clone())
        };
        let cost = sinkhorn::cost_matrix(&vx, &vy, t_n, s_n, k)?;
        let eps = sinkhorn::resolve_eps(eps, &cost);
        let rg = self.any_grad(&[x.0, y.0]);
        let (value, record) = if rg {
            let run = sinkhorn::log_domain_run(&cost, t_n, s_n, eps, iters, true);
            (
                run.value,
                Some(Box::new(SinkhornRecord {
                    eps,
                    cost,
                    f_hist: run.f_hist,
                    g_hist: run.g_hist,
                })),
            )
        } else {
            (
                sinkhorn::cost_from_matrix(&cost, t_n, s_n, eps, iters),
                None,
            )
        };
        Ok(self.push(
            vec![1],
            vec![value],
            Op::Sinkhorn {
                x: x.0,
                y: y.0,
                record,
            },
            rg,
        ))
    }

    // -- backward ------------------------------------------------------------

    /// Reverse pass from a scalar output. Visits each node once.
    pub fn backward(&self, output: Tensor) -> Grads {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[output.0].values.len(),
            1,
            "backward starts from a scalar"
        );
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[output.0] = Some(vec![1.0]);
        for id in (0..=output.0).rev() {
            let Some(gout) = grads[id].take() else {
                continue;
            };
            if nodes[id].requires_grad {
                backward_step(&nodes, id, &gout, &mut grads);
            }
            grads[id] = Some(gout);
        }
        Grads(grads)
    }
}

/// Accumulates `add` into `grads[target]`, allocating zeros on first touch.
fn accumulate(grads: &mut [Option<Vec<f64>>], target: usize, size: usize, add: &[f64]) {
    let slot = grads[target].get_or_insert_with(|| vec![0.0; size]);
    debug_assert_eq!(slot.len(), add.len());
    for (g, a) in slot.iter_mut().zip(add) {
        *g += a;
    }
}

fn backward_step(nodes: &[Node], id: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let size_of = |i: usize| nodes[i].values.len();
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if nodes[*a].requires_grad {
                accumulate(grads, *a, size_of(*a), gout);
            }
            if nodes[*b].requires_grad {
                accumulate(grads, *b, size_of(*b), gout);
            }
        }
        Op::Sub(a, b) => {
            if nodes[*a].requires_grad {
                accumulate(grads, *a, size_of(*a), gout);
            }
            if nodes[*b].requires_grad {
                let neg: Vec<f64> = gout.iter().map(|g| -g).collect();
                accumulate(grads, *b, size_of(*b), &neg);
            }
        }
        Op::Neg(a) => {
            if nodes[*a].requires_grad {
                let neg: Vec<f64> = gout.iter().map(|g| -g).collect();
                accumulate(grads, *a, size_of(*a), &neg);
            }
        }
        Op::Scale(a, c) => {
            if nodes[*a].requires_grad {
                let g: Vec<f64> = gout.iter().map(|g| c * g).collect();
                accumulate(grads, *a, size_of(*a), &g);
            }
        }
        Op::AddScalar(a) => {
            if nodes[*a].requires_grad {
                accumulate(grads, *a, size_of(*a), gout);
            }
        }
        Op::Mul(a, b) => {
            if nodes[*a].requires_grad {
                let g: Vec<f64> = gout
                    .iter()
                    .zip(&nodes[*b].values)
                    .map(|(g, y)| g * y)
                    .collect();
                accumulate(grads, *a, size_of(*a), &g);
            }
            if nodes[*b].requires_grad {
                let g: Vec<f64> = gout
                    .iter()
                    .zip(&nodes[*a].values)
                    .map(|(g, x)| g * x)
                    .collect();
                accumulate(grads, *b, size_of(*b), &g);
            }
        }
        Op::Sum(a) => {
            if nodes[*a].requires_grad {
                let g = vec![gout[0]; size_of(*a)];
                accumulate(grads, *a, size_of(*a), &g);
            }
        }
        Op::MeanList(items) => {
            let share = gout[0] / items.len() as f64;
            for &i in items {
                if nodes[i].requires_grad {
                    accumulate(grads, i, 1, &[share]);
                }
            }
        }
        Op::Matmul(a, b) => {
            let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            let n = nodes[*b].shape[1];
            if nodes[*a].requires_grad {
                let g = mat_mul_nt(gout, &nodes[*b].values, m, n, k);
                accumulate(grads, *a, size_of(*a), &g);
            }
            if nodes[*b].requires_grad {
                let g = mat_mul_tn(&nodes[*a].values, gout, m, k, n);
                accumulate(grads, *b, size_of(*b), &g);
            }
        }
        Op::Transpose(a) => {
            if nodes[*a].requires_grad {
                let (m, n) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                let mut g = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        g[i * n + j] = gout[j * m + i];
                    }
                }
                accumulate(grads, *a, size_of(*a), &g);
            }
        }
        Op::Reshape(a) => {
            if nodes[*a].requires_grad {
                accumulate(grads, *a, size_of(*a), gout);
            }
        }
        Op::Affine { x, w, b } => {
            let bs = nodes[*x].shape[0];
            let din = nodes[*x].shape[1];
            let dout = nodes[*w].shape[0];
            if nodes[*x].requires_grad {
                let g = mat_mul(gout, &nodes[*w].values, bs, dout, din);
                accumulate(grads, *x, size_of(*x), &g);
            }
            if nodes[*w].requires_grad {
                let g = mat_mul_tn(gout, &nodes[*x].values, bs, dout, din);
                accumulate(grads, *w, size_of(*w), &g);
            }
            if nodes[*b].requires_grad {
                let mut g = vec![0.0; dout];
                for r in 0..bs {
                    for o in 0..dout {
                        g[o] += gout[r * dout + o];
                    }
                }
                accumulate(grads, *b, size_of(*b), &g);
            }
        }
        Op::Elu(a) => {
            if nodes[*a].requires_grad {
                let g: Vec<f64> = gout
                    .iter()
                    .zip(nodes[id].values.iter())
                    .zip(nodes[*a].values.iter())
                    .map(|((g, &y), &x)| if x > 0.0 { *g } else { g * (y + 1.0) })
                    .collect();
                accumulate(grads, *a, size_of(*a), &g);
            }
        }
        Op::Relu(a) => {
            if nodes[*a].requires_grad {
                let g: Vec<f64> = gout
                    .iter()
                    .zip(nodes[*a].values.iter())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(grads, *a, size_of(*a), &g);
            }
        }
        Op::Tanh(a) => {
            if nodes[*a].requires_grad {
                let g: Vec<f64> = gout
                    .iter()
                    .zip(nodes[id].values.iter())
                    .map(|(g, y)| g * (1.0 - y * y))
                    .collect();
                accumulate(grads, *a, size_of(*a), &g);
            }
        }
        Op::Softplus(a) => {
            if nodes[*a].requires_grad {
                let g: Vec<f64> = gout
                    .iter()
                    .zip(nodes[*a].values.iter())
                    .map(|(g, &x)| g / (1.0 + (-x).exp()))
                    .collect();
                accumulate(grads, *a, size_of(*a), &g);
            }
        }
        Op::Exp(a) => {
            if nodes[*a].requires_grad {
                let g: Vec<f64> = gout
                    .iter()
                    .zip(nodes[id].values.iter())
                    .map(|(g, y)| g * y)
                    .collect();
                accumulate(grads, *a, size_of(*a), &g);
            }
        }
        Op::SliceCols { x, from, to } => {
            if nodes[*x].requires_grad {
                let rows = nodes[*x].shape[0];
                let cols = nodes[*x].shape[1];
                let width = to - from;
                let mut g = vec![0.0; rows * cols];
                for r in 0..rows {
                    g[r * cols + from..r * cols + to]
                        .copy_from_slice(&gout[r * width..(r + 1) * width]);
                }
                accumulate(grads, *x, size_of(*x), &g);
            }
        }
        Op::SliceBatch { x, index } => {
            if nodes[*x].requires_grad {
                let chunk = gout.len();
                let mut g = vec![0.0; size_of(*x)];
                g[index * chunk..(index + 1) * chunk].copy_from_slice(gout);
                accumulate(grads, *x, size_of(*x), &g);
            }
        }
        Op::Congruence { a, s } => {
            let d = nodes[*a].shape[0];
            let dd = d * d;
            let batch = size_of(*s) / dd;
            let va = &nodes[*a].values;
            let vs = &nodes[*s].values;
            if nodes[*a].requires_grad {
                let mut ga = vec![0.0; dd];
                for b in 0..batch {
                    let g = &gout[b * dd..(b + 1) * dd];
                    let sig = &vs[b * dd..(b + 1) * dd];
                    let gsym = sym_sum(g, d);
                    let tmp = mat_mul(&gsym, va, d, d, d);
                    let add = mat_mul(&tmp, sig, d, d, d);
                    for (x, y) in ga.iter_mut().zip(&add) {
                        *x += y;
                    }
                }
                accumulate(grads, *a, dd, &ga);
            }
            if nodes[*s].requires_grad {
                let mut gs = vec![0.0; size_of(*s)];
                for b in 0..batch {
                    let g = &gout[b * dd..(b + 1) * dd];
                    let tmp = mat_mul_tn(va, g, d, d, d);
                    let add = mat_mul(&tmp, va, d, d, d);
                    gs[b * dd..(b + 1) * dd].copy_from_slice(&add);
                }
                accumulate(grads, *s, size_of(*s), &gs);
            }
        }
        Op::EmbedMean { w, means, n, s_dim } => {
            if nodes[*w].requires_grad {
                let h = nodes[*w].shape[0];
                let d = nodes[*w].shape[1];
                let mut g = vec![0.0; h * d * s_dim];
                for v in 0..*n {
                    for c in 0..h {
                        for i in 0..d {
                            let go = gout[(v * d + i) * h + c];
                            for j in 0..*s_dim {
                                g[(c * d + i) * s_dim + j] += go * means[v * s_dim + j];
                            }
                        }
                    }
                }
                accumulate(grads, *w, size_of(*w), &g);
            }
        }
        Op::EmbedCov { w, covs, n, s_dim } => {
            if nodes[*w].requires_grad {
                let h = nodes[*w].shape[0];
                let d = nodes[*w].shape[1];
                let s = *s_dim;
                let vw = &nodes[*w].values;
                let mut g = vec![0.0; h * d * s];
                for v in 0..*n {
                    let sig = &covs[v * s * s..(v + 1) * s * s];
                    for c in 0..h {
                        let wc = &vw[c * d * s..(c + 1) * d * s];
                        let go = &gout[(v * h + c) * d * d..(v * h + c + 1) * d * d];
                        let gsym = sym_sum(go, d);
                        let tmp = mat_mul(&gsym, wc, d, d, s);
                        let add = mat_mul(&tmp, sig, d, s, s);
                        for (x, y) in g[c * d * s..(c + 1) * d * s].iter_mut().zip(&add) {
                            *x += y;
                        }
                    }
                }
                accumulate(grads, *w, size_of(*w), &g);
            }
        }
        Op::KronApply { w, x, d } => {
            let rows = nodes[*x].shape[0];
            let h = nodes[*x].shape[1];
            let n = rows / d;
            if nodes[*w].requires_grad {
                let mut g = vec![0.0; d * d];
                for v in 0..n {
                    let gb = &gout[v * d * h..(v + 1) * d * h];
                    let xb = &nodes[*x].values[v * d * h..(v + 1) * d * h];
                    let add = mat_mul_nt(gb, xb, *d, h, *d);
                    for (a, b) in g.iter_mut().zip(&add) {
                        *a += b;
                    }
                }
                accumulate(grads, *w, size_of(*w), &g);
            }
            if nodes[*x].requires_grad {
                let mut g = vec![0.0; rows * h];
                for v in 0..n {
                    let gb = &gout[v * d * h..(v + 1) * d * h];
                    let add = mat_mul_tn(&nodes[*w].values, gb, *d, *d, h);
                    g[v * d * h..(v + 1) * d * h].copy_from_slice(&add);
                }
                accumulate(grads, *x, size_of(*x), &g);
            }
        }
        Op::ChannelMixCov { s, w } => {
            let n = nodes[*s].shape[0];
            let h = nodes[*s].shape[1];
            let d = nodes[*s].shape[2];
            let h_out = nodes[*w].shape[1];
            let dd = d * d;
            if nodes[*s].requires_grad {
                let vw = &nodes[*w].values;
                let mut g = vec![0.0; size_of(*s)];
                for v in 0..n {
                    for c in 0..h {
                        let dst = &mut g[(v * h + c) * dd..(v * h + c + 1) * dd];
                        for co in 0..h_out {
                            let wgt = vw[c * h_out + co];
                            if wgt == 0.0 {
                                continue;
                            }
                            let go = &gout[(v * h_out + co) * dd..(v * h_out + co + 1) * dd];
                            for (dv, gv) in dst.iter_mut().zip(go) {
                                *dv += wgt * gv;
                            }
                        }
                    }
                }
                accumulate(grads, *s, size_of(*s), &g);
            }
            if nodes[*w].requires_grad {
                let vs = &nodes[*s].values;
                let mut g = vec![0.0; h * h_out];
                for v in 0..n {
                    for c in 0..h {
                        let src = &vs[(v * h + c) * dd..(v * h + c + 1) * dd];
                        for co in 0..h_out {
                            let go = &gout[(v * h_out + co) * dd..(v * h_out + co + 1) * dd];
                            let dot: f64 = src.iter().zip(go).map(|(a, b)| a * b).sum();
                            g[c * h_out + co] += dot;
                        }
                    }
                }
                accumulate(grads, *w, size_of(*w), &g);
            }
        }
        Op::DegInvSqrt { maps, ctx } => {
            if nodes[*maps].requires_grad {
                let d = ctx.d;
                let dd = d * d;
                let vm = &nodes[*maps].values;
                let deg = degree_blocks(vm, ctx);
                let mut gdeg = vec![0.0; ctx.n * dd];
                for v in 0..ctx.n {
                    let add = eigen_fn_backward(
                        &deg[v * dd..(v + 1) * dd],
                        &gout[v * dd..(v + 1) * dd],
                        d,
                        |l| {
                            if l < crate::sheaf::DEGREE_PINV_TOL {
                                0.0
                            } else {
                                1.0 / l.sqrt()
                            }
                        },
                        |l| {
                            if l < crate::sheaf::DEGREE_PINV_TOL {
                                0.0
                            } else {
                                -0.5 / (l * l.sqrt())
                            }
                        },
                    );
                    gdeg[v * dd..(v + 1) * dd].copy_from_slice(&add);
                }
                let mut g = vec![0.0; vm.len()];
                for (e, &(u, v)) in ctx.edges.iter().enumerate() {
                    for (side, node) in [(0usize, u), (1usize, v)] {
                        let f = &vm[(e * 2 + side) * dd..(e * 2 + side + 1) * dd];
                        let sym = sym_sum(&gdeg[node * dd..(node + 1) * dd], d);
                        let add = mat_mul(f, &sym, d, d, d);
                        g[(e * 2 + side) * dd..(e * 2 + side + 1) * dd].copy_from_slice(&add);
                    }
                }
                accumulate(grads, *maps, size_of(*maps), &g);
            }
        }
        Op::NormalizeMaps { maps, dis, ctx } => {
            let d = ctx.d;
            let dd = d * d;
            let vm = &nodes[*maps].values;
            let vd = &nodes[*dis].values;
            if nodes[*maps].requires_grad {
                let mut g = vec![0.0; size_of(*maps)];
                for (e, &(u, v)) in ctx.edges.iter().enumerate() {
                    for (side, node) in [(0usize, u), (1usize, v)] {
                        let go = &gout[(e * 2 + side) * dd..(e * 2 + side + 1) * dd];
                        let s = &vd[node * dd..(node + 1) * dd];
                        let add = mat_mul_nt(go, s, d, d, d);
                        g[(e * 2 + side) * dd..(e * 2 + side + 1) * dd].copy_from_slice(&add);
                    }
                }
                accumulate(grads, *maps, size_of(*maps), &g);
            }
            if nodes[*dis].requires_grad {
                let mut g = vec![0.0; size_of(*dis)];
                for (e, &(u, v)) in ctx.edges.iter().enumerate() {
                    for (side, node) in [(0usize, u), (1usize, v)] {
                        let go = &gout[(e * 2 + side) * dd..(e * 2 + side + 1) * dd];
                        let f = &vm[(e * 2 + side) * dd..(e * 2 + side + 1) * dd];
                        let add = mat_mul_tn(f, go, d, d, d);
                        for (x, y) in g[node * dd..(node + 1) * dd].iter_mut().zip(&add) {
                            *x += y;
                        }
                    }
                }
                accumulate(grads, *dis, size_of(*dis), &g);
            }
        }
        Op::SheafMeanApply { maps, x, ctx } => {
            let d = ctx.d;
            let dd = d * d;
            let h = nodes[*x].shape[1];
            let vm = &nodes[*maps].values;
            let vx = &nodes[*x].values;
            if nodes[*x].requires_grad {
                // The operator is symmetric in x: gX = L(G).
                let g = sheaf_mean_forward(vm, gout, h, ctx);
                accumulate(grads, *x, size_of(*x), &g);
            }
            if nodes[*maps].requires_grad {
                fn block(buf: &[f64], v: usize, chunk: usize) -> &[f64] {
                    &buf[v * chunk..(v + 1) * chunk]
                }
                let mut g = vec![0.0; vm.len()];
                for (e, &(u, v)) in ctx.edges.iter().enumerate() {
                    let fu = &vm[(e * 2) * dd..(e * 2 + 1) * dd];
                    let fv = &vm[(e * 2 + 1) * dd..(e * 2 + 2) * dd];
                    let xu = block(vx, u, d * h);
                    let xv = block(vx, v, d * h);
                    let gu = block(gout, u, d * h);
                    let gv = block(gout, v, d * h);
                    // gFu = Fu (Xu Ḡuᵀ + Ḡu Xuᵀ) − Fv (Xv Ḡuᵀ + Ḡv Xuᵀ)
                    let a = add_mats(&mat_mul_nt(xu, gu, d, h, d), &mat_mul_nt(gu, xu, d, h, d));
                    let b = add_mats(&mat_mul_nt(xv, gu, d, h, d), &mat_mul_nt(gv, xu, d, h, d));
                    let gfu = sub_mats(&mat_mul(fu, &a, d, d, d), &mat_mul(fv, &b, d, d, d));
                    for (x_, y_) in g[(e * 2) * dd..(e * 2 + 1) * dd].iter_mut().zip(&gfu) {
                        *x_ += y_;
                    }
                    let a = add_mats(&mat_mul_nt(xv, gv, d, h, d), &mat_mul_nt(gv, xv, d, h, d));
                    let b = add_mats(&mat_mul_nt(xu, gv, d, h, d), &mat_mul_nt(gu, xv, d, h, d));
                    let gfv = sub_mats(&mat_mul(fv, &a, d, d, d), &mat_mul(fu, &b, d, d, d));
                    for (x_, y_) in g[(e * 2 + 1) * dd..(e * 2 + 2) * dd].iter_mut().zip(&gfv) {
                        *x_ += y_;
                    }
                }
                accumulate(grads, *maps, size_of(*maps), &g);
            }
        }
        Op::SheafCovApply { maps, s, ctx } => {
            let d = ctx.d;
            let dd = d * d;
            let h = nodes[*s].shape[1];
            let vm = &nodes[*maps].values;
            let vs = &nodes[*s].values;
            fn blk(buf: &[f64], v: usize, c: usize, h: usize, dd: usize) -> &[f64] {
                &buf[(v * h + c) * dd..(v * h + c + 1) * dd]
            }
            if nodes[*s].requires_grad {
                let mut g = vec![0.0; vs.len()];
                for (e, &(u, v)) in ctx.edges.iter().enumerate() {
                    let fu = &vm[(e * 2) * dd..(e * 2 + 1) * dd];
                    let fv = &vm[(e * 2 + 1) * dd..(e * 2 + 2) * dd];
                    let au = mat_mul_tn(fu, fu, d, d, d);
                    let av = mat_mul_tn(fv, fv, d, d, d);
                    let cuv = mat_mul_tn(fu, fv, d, d, d);
                    let cvu = mat_mul_tn(fv, fu, d, d, d);
                    for c in 0..h {
                        let gu = blk(gout, u, c, h, dd);
                        let gv = blk(gout, v, c, h, dd);
                        let t1 = mat_mul(&mat_mul(&au, gu, d, d, d), &au, d, d, d);
                        let t2 = mat_mul_nt(&mat_mul(&cuv, gv, d, d, d), &cuv, d, d, d);
                        for (x_, y_) in g[(u * h + c) * dd..(u * h + c + 1) * dd]
                            .iter_mut()
                            .zip(add_mats(&t1, &t2).iter())
                        {
                            *x_ += y_;
                        }
                        let t1 = mat_mul(&mat_mul(&av, gv, d, d, d), &av, d, d, d);
                        let t2 = mat_mul_nt(&mat_mul(&cvu, gu, d, d, d), &cvu, d, d, d);
                        for (x_, y_) in g[(v * h + c) * dd..(v * h + c + 1) * dd]
                            .iter_mut()
                            .zip(add_mats(&t1, &t2).iter())
                        {
                            *x_ += y_;
                        }
                    }
                }
                accumulate(grads, *s, size_of(*s), &g);
            }
            if nodes[*maps].requires_grad {
                let mut g = vec![0.0; vm.len()];
                for (e, &(u, v)) in ctx.edges.iter().enumerate() {
                    let fu = &vm[(e * 2) * dd..(e * 2 + 1) * dd];
                    let fv = &vm[(e * 2 + 1) * dd..(e * 2 + 2) * dd];
                    let mut gfu = vec![0.0; dd];
                    let mut gfv = vec![0.0; dd];
                    for c in 0..h {
                        let su = blk(vs, u, c, h, dd);
                        let sv = blk(vs, v, c, h, dd);
                        let gu = blk(gout, u, c, h, dd);
                        let gv = blk(gout, v, c, h, dd);
                        let mu = mat_mul_nt(&mat_mul(fu, su, d, d, d), fu, d, d, d);
                        let mv = mat_mul_nt(&mat_mul(fv, sv, d, d, d), fv, d, d, d);
                        let m = add_mats(&mu, &mv);
                        let qu = mat_mul_nt(&mat_mul(fu, gu, d, d, d), fu, d, d, d);
                        let qv = mat_mul_nt(&mat_mul(fv, gv, d, d, d), fv, d, d, d);
                        let qsym = sym_sum(&add_mats(&qu, &qv), d);
                        let gusym = sym_sum(gu, d);
                        let gvsym = sym_sum(gv, d);
                        let part1 = mat_mul(&mat_mul(&m, fu, d, d, d), &gusym, d, d, d);
                        let part2 = mat_mul(&mat_mul(&qsym, fu, d, d, d), su, d, d, d);
                        for (x_, y_) in gfu.iter_mut().zip(add_mats(&part1, &part2).iter()) {
                            *x_ += y_;
                        }
                        let part1 = mat_mul(&mat_mul(&m, fv, d, d, d), &gvsym, d, d, d);
                        let part2 = mat_mul(&mat_mul(&qsym, fv, d, d, d), sv, d, d, d);
                        for (x_, y_) in gfv.iter_mut().zip(add_mats(&part1, &part2).iter()) {
                            *x_ += y_;
                        }
                    }
                    for (x_, y_) in g[(e * 2) * dd..(e * 2 + 1) * dd].iter_mut().zip(&gfu) {
                        *x_ += y_;
                    }
                    for (x_, y_) in g[(e * 2 + 1) * dd..(e * 2 + 2) * dd].iter_mut().zip(&gfv) {
                        *x_ += y_;
                    }
                }
                accumulate(grads, *maps, size_of(*maps), &g);
            }
        }
        Op::NodePairGather { x, ctx } => {
            if nodes[*x].requires_grad {
                let d = ctx.d;
                let h = nodes[*x].shape[1];
                let mut gbar = vec![0.0; ctx.n * d];
                for (e, &(u, v)) in ctx.edges.iter().enumerate() {
                    let row0 = &gout[(e * 2) * 2 * d..(e * 2 + 1) * 2 * d];
                    let row1 = &gout[(e * 2 + 1) * 2 * d..(e * 2 + 2) * 2 * d];
                    for i in 0..d {
                        gbar[u * d + i] += row0[i] + row1[d + i];
                        gbar[v * d + i] += row0[d + i] + row1[i];
                    }
                }
                let mut g = vec![0.0; size_of(*x)];
                for r in 0..ctx.n * d {
                    let share = gbar[r] / h as f64;
                    for c in 0..h {
                        g[r * h + c] = share;
                    }
                }
                accumulate(grads, *x, size_of(*x), &g);
            }
        }
        Op::Cayley { p, d } => {
            if nodes[*p].requires_grad {
                let d = *d;
                let k = d * (d - 1) / 2;
                let batch = nodes[*p].shape[0];
                let vp = &nodes[*p].values;
                let mut g = vec![0.0; batch * k];
                for b in 0..batch {
                    let gb = cayley_backward(
                        &vp[b * k..(b + 1) * k],
                        &gout[b * d * d..(b + 1) * d * d],
                        d,
                    );
                    g[b * k..(b + 1) * k].copy_from_slice(&gb);
                }
                accumulate(grads, *p, size_of(*p), &g);
            }
        }
        Op::DiagEmbed { p } => {
            if nodes[*p].requires_grad {
                let batch = nodes[*p].shape[0];
                let d = nodes[*p].shape[1];
                let mut g = vec![0.0; batch * d];
                for b in 0..batch {
                    for i in 0..d {
                        g[b * d + i] = gout[b * d * d + i * d + i];
                    }
                }
                accumulate(grads, *p, size_of(*p), &g);
            }
        }
        Op::GeneralMaps { p } => {
            if nodes[*p].requires_grad {
                accumulate(grads, *p, size_of(*p), gout);
            }
        }
        Op::EigenSqrt { s } => {
            if nodes[*s].requires_grad {
                let sh = &nodes[*s].shape;
                let d = sh[sh.len() - 1];
                let dd = d * d;
                let batch = size_of(*s) / dd;
                let vs = &nodes[*s].values;
                let mut g = vec![0.0; size_of(*s)];
                for b in 0..batch {
                    let add = eigen_fn_backward(
                        &vs[b * dd..(b + 1) * dd],
                        &gout[b * dd..(b + 1) * dd],
                        d,
                        |l| l.max(0.0).sqrt(),
                        |l| if l > 0.0 { 0.5 / l.sqrt() } else { 0.0 },
                    );
                    g[b * dd..(b + 1) * dd].copy_from_slice(&add);
                }
                accumulate(grads, *s, size_of(*s), &g);
            }
        }
        Op::CholeskyJitter { s } => {
            if nodes[*s].requires_grad {
                let sh = &nodes[*s].shape;
                let d = sh[sh.len() - 1];
                let dd = d * d;
                let batch = size_of(*s) / dd;
                let vl = &nodes[id].values;
                let mut g = vec![0.0; size_of(*s)];
                for b in 0..batch {
                    let add = cholesky_backward(
                        &vl[b * dd..(b + 1) * dd],
                        &gout[b * dd..(b + 1) * dd],
                        d,
                    );
                    g[b * dd..(b + 1) * dd].copy_from_slice(&add);
                }
                accumulate(grads, *s, size_of(*s), &g);
            }
        }
        Op::Reparam { mean, root, z, t } => {
            let n = nodes[*mean].shape[0];
            let d = nodes[*mean].shape[1];
            if nodes[*mean].requires_grad {
                let mut g = vec![0.0; n * d];
                for v in 0..n {
                    for s in 0..*t {
                        for i in 0..d {
                            g[v * d + i] += gout[(v * t + s) * d + i];
                        }
                    }
                }
                accumulate(grads, *mean, size_of(*mean), &g);
            }
            if nodes[*root].requires_grad {
                let mut g = vec![0.0; n * d * d];
                for v in 0..n {
                    for s in 0..*t {
                        let go = &gout[(v * t + s) * d..(v * t + s + 1) * d];
                        let zr = &z[(v * t + s) * d..(v * t + s + 1) * d];
                        for i in 0..d {
                            for j in 0..d {
                                g[v * d * d + i * d + j] += go[i] * zr[j];
                            }
                        }
                    }
                }
                accumulate(grads, *root, size_of(*root), &g);
            }
        }
        Op::ReparamDiag { mean, std, z, t } => {
            let n = nodes[*mean].shape[0];
            let d = nodes[*mean].shape[1];
            if nodes[*mean].requires_grad {
                let mut g = vec![0.0; n * d];
                for v in 0..n {
                    for s in 0..*t {
                        for i in 0..d {
                            g[v * d + i] += gout[(v * t + s) * d + i];
                        }
                    }
                }
                accumulate(grads, *mean, size_of(*mean), &g);
            }
            if nodes[*std].requires_grad {
                let mut g = vec![0.0; n * d];
                for v in 0..n {
                    for s in 0..*t {
                        for i in 0..d {
                            g[v * d + i] += gout[(v * t + s) * d + i] * z[(v * t + s) * d + i];
                        }
                    }
                }
                accumulate(grads, *std, size_of(*std), &g);
            }
        }
        Op::AdjProp { x, a, n } => {
            if nodes[*x].requires_grad {
                let t = nodes[*x].shape[0];
                let f = nodes[*x].shape[2];
                let mut g = vec![0.0; size_of(*x)];
                for b in 0..t {
                    let gb = &gout[b * n * f..(b + 1) * n * f];
                    let add = mat_mul_tn(a, gb, *n, *n, f);
                    g[b * n * f..(b + 1) * n * f].copy_from_slice(&add);
                }
                accumulate(grads, *x, size_of(*x), &g);
            }
        }
        Op::RowScale { x, s } => {
            let r = nodes[*x].shape[0];
            let c = nodes[*x].shape[1];
            if nodes[*x].requires_grad {
                let vs = &nodes[*s].values;
                let mut g = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        g[i * c + j] = gout[i * c + j] * vs[i];
                    }
                }
                accumulate(grads, *x, size_of(*x), &g);
            }
            if nodes[*s].requires_grad {
                let vx = &nodes[*x].values;
                let mut g = vec![0.0; r];
                for i in 0..r {
                    for j in 0..c {
                        g[i] += gout[i * c + j] * vx[i * c + j];
                    }
                }
                accumulate(grads, *s, size_of(*s), &g);
            }
        }
        Op::Sinkhorn { x, y, record } => {
            let record = record
                .as_ref()
                .expect("sinkhorn recorded without history but grad requested");
            let t_n = nodes[*x].shape[0];
            let s_n = nodes[*y].shape[0];
            let k = nodes[*x].shape[1];
            let (gx, gy) = sinkhorn::backward(
                record,
                &nodes[*x].values,
                &nodes[*y].values,
                t_n,
                s_n,
                k,
                gout[0],
            );
            if nodes[*x].requires_grad {
                accumulate(grads, *x, size_of(*x), &gx);
            }
            if nodes[*y].requires_grad {
                accumulate(grads, *y, size_of(*y), &gy);
            }
        }
    }
}

// -- shared dense helpers -----------------------------------------------------

/// `C = A B` for row-major slices, `A: (m, k)`, `B: (k, n)`.
pub(crate) fn mat_mul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// `C = A Bᵀ`, `A: (m, k)`, `B: (n, k)`.
pub(crate) fn mat_mul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// `C = Aᵀ B`, `A: (m, k)`, `B: (m, n)`.
pub(crate) fn mat_mul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for p in 0..m {
        for i in 0..k {
            let av = a[p * k + i];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

fn add_mats(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn sub_mats(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// `G + Gᵀ` for a square block.
fn sym_sum(g: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            out[i * d + j] = g[i * d + j] + g[j * d + i];
        }
    }
    out
}

fn sheaf_mean_forward(maps: &[f64], x: &[f64], h: usize, ctx: &SheafCtx) -> Vec<f64> {
    let d = ctx.d;
    let dd = d * d;
    let mut y = vec![0.0; ctx.n * d * h];
    for (e, &(u, v)) in ctx.edges.iter().enumerate() {
        let fu = &maps[(e * 2) * dd..(e * 2 + 1) * dd];
        let fv = &maps[(e * 2 + 1) * dd..(e * 2 + 2) * dd];
        let xu = &x[u * d * h..(u + 1) * d * h];
        let xv = &x[v * d * h..(v + 1) * d * h];
        let diff = sub_mats(&mat_mul(fu, xu, d, d, h), &mat_mul(fv, xv, d, d, h));
        let yu = mat_mul_tn(fu, &diff, d, d, h);
        let yv = mat_mul_tn(fv, &diff, d, d, h);
        for (dst, src) in y[u * d * h..(u + 1) * d * h].iter_mut().zip(&yu) {
            *dst += src;
        }
        for (dst, src) in y[v * d * h..(v + 1) * d * h].iter_mut().zip(&yv) {
            *dst -= src;
        }
    }
    y
}

fn sheaf_cov_forward(maps: &[f64], s: &[f64], h: usize, ctx: &SheafCtx) -> Vec<f64> {
    let d = ctx.d;
    let dd = d * d;
    let mut y = vec![0.0; ctx.n * h * dd];
    for (e, &(u, v)) in ctx.edges.iter().enumerate() {
        let fu = &maps[(e * 2) * dd..(e * 2 + 1) * dd];
        let fv = &maps[(e * 2 + 1) * dd..(e * 2 + 2) * dd];
        for c in 0..h {
            let su = &s[(u * h + c) * dd..(u * h + c + 1) * dd];
            let sv = &s[(v * h + c) * dd..(v * h + c + 1) * dd];
            let mu = mat_mul_nt(&mat_mul(fu, su, d, d, d), fu, d, d, d);
            let mv = mat_mul_nt(&mat_mul(fv, sv, d, d, d), fv, d, d, d);
            let m = add_mats(&mu, &mv);
            let yu = mat_mul(&mat_mul_tn(fu, &m, d, d, d), fu, d, d, d);
            let yv = mat_mul(&mat_mul_tn(fv, &m, d, d, d), fv, d, d, d);
            for (dst, src) in y[(u * h + c) * dd..(u * h + c + 1) * dd]
                .iter_mut()
                .zip(&yu)
            {
                *dst += src;
            }
            for (dst, src) in y[(v * h + c) * dd..(v * h + c + 1) * dd]
                .iter_mut()
                .zip(&yv)
            {
                *dst += src;
            }
        }
    }
    y
}

fn degree_blocks(maps: &[f64], ctx: &SheafCtx) -> Vec<f64> {
    let d = ctx.d;
    let dd = d * d;
    let mut deg = vec![0.0; ctx.n * dd];
    for (e, &(u, v)) in ctx.edges.iter().enumerate() {
        for (side, node) in [(0usize, u), (1usize, v)] {
            let f = &maps[(e * 2 + side) * dd..(e * 2 + side + 1) * dd];
            let ftf = mat_mul_tn(f, f, d, d, d);
            for (dst, src) in deg[node * dd..(node + 1) * dd].iter_mut().zip(&ftf) {
                *dst += src;
            }
        }
    }
    deg
}

/// `f(S)` for a symmetric block via eigendecomposition.
fn eigen_apply(block: &[f64], d: usize, f: impl Fn(f64) -> f64) -> Vec<f64> {
    let m = DMatrix::from_row_slice(d, d, block);
    let sym = (&m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let vals = eig.eigenvalues.map(&f);
    let r = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    let rt = r.transpose();
    let out = (r + rt) * 0.5;
    (0..d * d).map(|i| out[(i / d, i % d)]).collect()
}

fn psd_sqrt_block(block: &[f64], d: usize) -> Vec<f64> {
    eigen_apply(block, d, |l| l.max(0.0).sqrt())
}

fn psd_inv_sqrt_block(block: &[f64], d: usize) -> Vec<f64> {
    eigen_apply(block, d, |l| {
        if l < crate::sheaf::DEGREE_PINV_TOL {
            0.0
        } else {
            1.0 / l.sqrt()
        }
    })
}

/// Eigenvalue gap below which divided differences switch to the derivative.
const EIGEN_GAP_FLOOR: f64 = 1e-8;

/// Adjoint of `S ↦ f(S)` on symmetric matrices: `Q (K ∘ (Qᵀ Ḡ Q)) Qᵀ` with
/// the divided-difference kernel `K`.
fn eigen_fn_backward(
    block: &[f64],
    gout: &[f64],
    d: usize,
    f: impl Fn(f64) -> f64,
    fprime: impl Fn(f64) -> f64,
) -> Vec<f64> {
    let m = DMatrix::from_row_slice(d, d, block);
    let sym = (&m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let q = &eig.eigenvectors;
    let lam = &eig.eigenvalues;
    let g = DMatrix::from_row_slice(d, d, gout);
    let gsym = (&g + g.transpose()) * 0.5;
    let inner = q.transpose() * gsym * q;
    let mut k = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            let gap = lam[i] - lam[j];
            k[(i, j)] = if gap.abs() > EIGEN_GAP_FLOOR {
                (f(lam[i]) - f(lam[j])) / gap
            } else {
                fprime(0.5 * (lam[i] + lam[j]))
            };
        }
    }
    let core = inner.component_mul(&k);
    let out = q * core * q.transpose();
    (0..d * d).map(|i| out[(i / d, i % d)]).collect()
}

/// Lower Cholesky factor of a symmetric positive-definite block, if any.
fn cholesky_block(block: &[f64], d: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut acc = block[i * d + j];
            for p in 0..j {
                acc -= l[i * d + p] * l[j * d + p];
            }
            if i == j {
                if acc <= 0.0 {
                    return None;
                }
                l[i * d + i] = acc.sqrt();
            } else {
                l[i * d + j] = acc / l[j * d + j];
            }
        }
    }
    Some(l)
}

/// Reverse rule for `S ↦ chol(S)` via two triangular solves.
fn cholesky_backward(l: &[f64], gout: &[f64], d: usize) -> Vec<f64> {
    // P = Phi(Lᵀ Ḡ): keep the lower triangle, halve the diagonal.
    let lt_g = mat_mul_tn(l, gout, d, d, d);
    let mut p = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            p[i * d + j] = if i == j {
                0.5 * lt_g[i * d + j]
            } else {
                lt_g[i * d + j]
            };
        }
    }
    // X = L⁻ᵀ P: back substitution per column.
    let mut x = p;
    for col in 0..d {
        for i in (0..d).rev() {
            let mut acc = x[i * d + col];
            for p2 in (i + 1)..d {
                acc -= l[p2 * d + i] * x[p2 * d + col];
            }
            x[i * d + col] = acc / l[i * d + i];
        }
    }
    // Z = X L⁻¹, i.e. solve Z L = X row-wise; L is lower triangular so the
    // columns resolve in descending order.
    let mut z = vec![0.0; d * d];
    for row in 0..d {
        for j in (0..d).rev() {
            let mut acc = x[row * d + j];
            for p2 in (j + 1)..d {
                acc -= z[row * d + p2] * l[p2 * d + j];
            }
            z[row * d + j] = acc / l[j * d + j];
        }
    }
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            out[i * d + j] = 0.5 * (z[i * d + j] + z[j * d + i]);
        }
    }
    out
}

fn cayley_forward(p: &[f64], d: usize) -> Vec<f64> {
    let s = skew_from_params(p, d);
    let eye = DMatrix::identity(d, d);
    let i_minus = &eye - &s;
    match i_minus.clone().try_inverse() {
        Some(inv) => {
            let m = inv * (&eye + &s);
            (0..d * d).map(|i| m[(i / d, i % d)]).collect()
        }
        // Unreachable for skew S (det(I − S) >= 1), kept as the documented
        // fallback: the exponential lands in the same group.
        None => {
            let m = expm(&s);
            (0..d * d).map(|i| m[(i / d, i % d)]).collect()
        }
    }
}

fn cayley_backward(p: &[f64], gout: &[f64], d: usize) -> Vec<f64> {
    let s = skew_from_params(p, d);
    let eye = DMatrix::identity(d, d);
    let i_minus = &eye - &s;
    let inv = i_minus
        .clone()
        .try_inverse()
        .expect("I - S is invertible for skew-symmetric S");
    let m = &inv * (&eye + &s);
    let g = DMatrix::from_row_slice(d, d, gout);
    // dM = (I−S)⁻¹ dS (M + I); adjoint: P = (I−S)⁻ᵀ Ḡ (M + I)ᵀ
    let pmat = inv.transpose() * g * (&m + &eye).transpose();
    let k = d * (d - 1) / 2;
    let mut gp = vec![0.0; k];
    let mut idx = 0;
    for i in 0..d {
        for j in (i + 1)..d {
            gp[idx] = pmat[(i, j)] - pmat[(j, i)];
            idx += 1;
        }
    }
    gp
}

fn skew_from_params(p: &[f64], d: usize) -> DMatrix<f64> {
    let mut s = DMatrix::zeros(d, d);
    let mut idx = 0;
    for i in 0..d {
        for j in (i + 1)..d {
            s[(i, j)] = p[idx];
            s[(j, i)] = -p[idx];
            idx += 1;
        }
    }
    s
}

/// Matrix exponential by scaling and squaring on a plain Taylor series;
/// adequate for the bounded skew blocks it may ever see.
pub(crate) fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    let d = a.nrows();
    let norm = a.norm();
    let squarings = norm.log2().ceil().max(0.0) as u32 + 1;
    let scaled = a / 2f64.powi(squarings as i32);
    let mut term = DMatrix::identity(d, d);
    let mut acc = DMatrix::identity(d, d);
    for k in 1..=16 {
        term = &term * &scaled / k as f64;
        acc += &term;
    }
    for _ in 0..squarings {
        acc = &acc * &acc;
    }
    acc
}
