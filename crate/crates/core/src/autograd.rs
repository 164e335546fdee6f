//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] walks the tape in reverse and returns the gradient of a
//! scalar with respect to every node that (transitively) depends on a
//! trainable leaf. Nodes built only from constants carry no backward closure.
//!
//! Higher-order quantities (surface normals inside a loss, the R1 input
//! gradient) are built explicitly out of first-order ops by the models, so
//! the tape itself never needs to differentiate a backward pass.

use std::collections::HashMap;

use crate::nn::ParamSet;
use crate::tensor::{col2im, gemm, im2col, ConvGeom, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Ctx<'a> {
    grad: &'a Tensor,
    out: &'a Tensor,
    inputs: Vec<&'a Tensor>,
    needs: Vec<bool>,
}

type BackFn = Box<dyn Fn(&Ctx<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    back: Option<BackFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<(u64, usize), Var>,
}

/// Bilinear taps of one sample point: four flat pixel indices and weights.
#[derive(Clone, Copy, Debug, Default)]
struct Taps {
    idx: [usize; 4],
    w: [f64; 4],
}

fn zip3(g: &Tensor, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
    let data = g
        .data()
        .iter()
        .zip(a.data())
        .zip(b.data())
        .map(|((&g, &a), &b)| f(g, a, b))
        .collect();
    Tensor::new(a.shape(), data)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, parents: &[Var], back: BackFn) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            back: if requires_grad { Some(back) } else { None },
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, parents: Vec::new(), back: None, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// A leaf whose gradient is tracked (inputs to finite-difference checks, latent codes).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf for parameter `idx` of `set`; repeated requests return the same node.
    pub fn param(&mut self, set: &ParamSet, idx: usize) -> Var {
        let key = (set.uid(), idx);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.push_leaf(set.value(idx).clone(), !set.is_frozen());
        self.params.insert(key, v);
        v
    }

    /// Copy the current value into a fresh constant leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    // ---- elementwise -------------------------------------------------

    fn unary(
        &mut self,
        x: Var,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var {
        let out = self.value(x).map(f);
        self.push(
            out,
            &[x],
            Box::new(move |c| vec![Some(zip3(c.grad, c.inputs[0], c.out, |g, x, y| g * df(x, y)))]),
        )
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(x, f64::sin, |x, _| x.cos())
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(x, f64::cos, |x, _| -x.sin())
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, |_, y| y)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, |x, _| 1.0 / x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, |x, _| sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(
            x,
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |x| x * x, |x, _| 2.0 * x)
    }

    /// Square root with the subgradient 0 taken at 0, so norms of exact matches stay finite.
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, |x| x.max(0.0).sqrt(), |_, y| if y > 0.0 { 0.5 / y } else { 0.0 })
    }

    pub fn recip(&mut self, x: Var) -> Var {
        self.unary(x, |x| 1.0 / x, |_, y| -y * y)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).scale(c);
        self.push(out, &[x], Box::new(move |ctx| vec![Some(ctx.grad.scale(c))]))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        self.push(out, &[x], Box::new(|ctx| vec![Some(ctx.grad.clone())]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, &[a, b], Box::new(|c| vec![Some(c.grad.clone()), Some(c.grad.clone())]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(out, &[a, b], Box::new(|c| vec![Some(c.grad.clone()), Some(c.grad.scale(-1.0))]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(
            out,
            &[a, b],
            Box::new(|c| {
                vec![
                    c.needs[0].then(|| c.grad.zip_map(c.inputs[1], |g, y| g * y)),
                    c.needs[1].then(|| c.grad.zip_map(c.inputs[0], |g, x| g * x)),
                ]
            }),
        )
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.push(
            out,
            &[a, b],
            Box::new(|c| {
                vec![
                    c.needs[0].then(|| c.grad.zip_map(c.inputs[1], |g, y| g / y)),
                    c.needs[1].then(|| zip3(c.grad, c.out, c.inputs[1], |g, q, y| -g * q / y)),
                ]
            }),
        )
    }

    /// Sum of several same-shaped vars.
    pub fn sum_vars(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "sum_vars of nothing");
        let mut acc = xs[0];
        for &x in &xs[1..] {
            acc = self.add(acc, x);
        }
        acc
    }

    // ---- broadcasting ------------------------------------------------

    /// `x[.., c] + r[c]`, broadcast over leading rows.
    pub fn add_row(&mut self, x: Var, r: Var) -> Var {
        let c = self.value(r).len();
        let xv = self.value(x);
        assert_eq!(xv.len() % c, 0, "add_row width mismatch: {:?} vs {c}", xv.shape());
        let rv = self.value(r).data().to_vec();
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, b) in row.iter_mut().zip(&rv) {
                *o += b;
            }
        }
        self.push(
            out,
            &[x, r],
            Box::new(move |ctx| {
                let gr = ctx.needs[1].then(|| {
                    let mut s = vec![0.0; c];
                    for row in ctx.grad.data().chunks(c) {
                        for (a, g) in s.iter_mut().zip(row) {
                            *a += g;
                        }
                    }
                    Tensor::new(ctx.inputs[1].shape(), s)
                });
                vec![Some(ctx.grad.clone()), gr]
            }),
        )
    }

    /// `x[.., c] * r[c]`, broadcast over leading rows.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Var {
        let c = self.value(r).len();
        let xv = self.value(x);
        assert_eq!(xv.len() % c, 0, "mul_row width mismatch: {:?} vs {c}", xv.shape());
        let rv = self.value(r).data().to_vec();
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, b) in row.iter_mut().zip(&rv) {
                *o *= b;
            }
        }
        self.push(
            out,
            &[x, r],
            Box::new(move |ctx| {
                let r = ctx.inputs[1].data();
                let gx = ctx.needs[0].then(|| {
                    let mut g = ctx.grad.clone();
                    for row in g.data_mut().chunks_mut(c) {
                        for (a, b) in row.iter_mut().zip(r) {
                            *a *= b;
                        }
                    }
                    g
                });
                let gr = ctx.needs[1].then(|| {
                    let mut s = vec![0.0; c];
                    for (grow, xrow) in ctx.grad.data().chunks(c).zip(ctx.inputs[0].data().chunks(c)) {
                        for j in 0..c {
                            s[j] += grow[j] * xrow[j];
                        }
                    }
                    Tensor::new(ctx.inputs[1].shape(), s)
                });
                vec![gx, gr]
            }),
        )
    }

    /// `x[n, ..] + v[n]`, broadcast over trailing elements of each leading slice.
    pub fn add_col(&mut self, x: Var, v: Var) -> Var {
        let n = self.value(v).len();
        let xv = self.value(x);
        assert_eq!(xv.len() % n, 0, "add_col length mismatch");
        let w = xv.len() / n;
        let vv = self.value(v).data().to_vec();
        let mut out = xv.clone();
        for (row, b) in out.data_mut().chunks_mut(w).zip(&vv) {
            for o in row {
                *o += b;
            }
        }
        self.push(
            out,
            &[x, v],
            Box::new(move |ctx| {
                let gv = ctx.needs[1].then(|| {
                    let s = ctx.grad.data().chunks(w).map(|r| r.iter().sum()).collect();
                    Tensor::new(ctx.inputs[1].shape(), s)
                });
                vec![Some(ctx.grad.clone()), gv]
            }),
        )
    }

    /// `x[n, ..] * v[n]`, broadcast over trailing elements of each leading slice.
    pub fn mul_col(&mut self, x: Var, v: Var) -> Var {
        let n = self.value(v).len();
        let xv = self.value(x);
        assert_eq!(xv.len() % n, 0, "mul_col length mismatch");
        let w = xv.len() / n;
        let vv = self.value(v).data().to_vec();
        let mut out = xv.clone();
        for (row, b) in out.data_mut().chunks_mut(w).zip(&vv) {
            for o in row {
                *o *= b;
            }
        }
        self.push(
            out,
            &[x, v],
            Box::new(move |ctx| {
                let v = ctx.inputs[1].data();
                let gx = ctx.needs[0].then(|| {
                    let mut g = ctx.grad.clone();
                    for (row, b) in g.data_mut().chunks_mut(w).zip(v) {
                        for a in row {
                            *a *= b;
                        }
                    }
                    g
                });
                let gv = ctx.needs[1].then(|| {
                    let s = ctx
                        .grad
                        .data()
                        .chunks(w)
                        .zip(ctx.inputs[0].data().chunks(w))
                        .map(|(g, x)| g.iter().zip(x).map(|(a, b)| a * b).sum())
                        .collect();
                    Tensor::new(ctx.inputs[1].shape(), s)
                });
                vec![gx, gv]
            }),
        )
    }

    // ---- reductions --------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(
            out,
            &[x],
            Box::new(|c| vec![Some(Tensor::full(c.inputs[0].shape(), c.grad.item()))]),
        )
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// `[n, c] -> [c]`: sum over rows.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let (_, c) = self.value(x).as_matrix_dims();
        let mut s = vec![0.0; c];
        for row in self.value(x).data().chunks(c) {
            for (a, b) in s.iter_mut().zip(row) {
                *a += b;
            }
        }
        self.push(
            Tensor::new(&[c], s),
            &[x],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut out = Tensor::zeros(ctx.inputs[0].shape());
                for row in out.data_mut().chunks_mut(c) {
                    row.copy_from_slice(g);
                }
                vec![Some(out)]
            }),
        )
    }

    /// `[n, c] -> [n]`: sum within each row.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let (n, c) = self.value(x).as_matrix_dims();
        let s: Vec<f64> = self.value(x).data().chunks(c).map(|r| r.iter().sum()).collect();
        self.push(
            Tensor::new(&[n], s),
            &[x],
            Box::new(move |ctx| {
                let mut out = Tensor::zeros(ctx.inputs[0].shape());
                for (row, g) in out.data_mut().chunks_mut(c).zip(ctx.grad.data()) {
                    row.fill(*g);
                }
                vec![Some(out)]
            }),
        )
    }

    // ---- shape -------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshape(shape);
        self.push(
            out,
            &[x],
            Box::new(|c| vec![Some(c.grad.clone().reshape(c.inputs[0].shape()))]),
        )
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        self.push(out, &[x], Box::new(|c| vec![Some(c.grad.transpose())]))
    }

    /// Concatenate `[n, c_i]` blocks along the column axis.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Var {
        let widths: Vec<usize> = xs.iter().map(|&x| self.value(x).as_matrix_dims().1).collect();
        let n = self.value(xs[0]).as_matrix_dims().0;
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; n * total];
        let mut off = 0;
        for (&x, &w) in xs.iter().zip(&widths) {
            let xv = self.value(x);
            assert_eq!(xv.as_matrix_dims().0, n, "concat_cols row mismatch");
            for (i, row) in xv.data().chunks(w).enumerate() {
                out[i * total + off..i * total + off + w].copy_from_slice(row);
            }
            off += w;
        }
        self.push(
            Tensor::new(&[n, total], out),
            xs,
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut off = 0;
                widths
                    .iter()
                    .enumerate()
                    .map(|(k, &w)| {
                        let r = ctx.needs[k].then(|| {
                            let mut t = Vec::with_capacity(n * w);
                            for i in 0..n {
                                t.extend_from_slice(&g[i * total + off..i * total + off + w]);
                            }
                            Tensor::new(ctx.inputs[k].shape(), t)
                        });
                        off += w;
                        r
                    })
                    .collect()
            }),
        )
    }

    /// Columns `start..end` of an `[n, c]` var.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let (n, c) = self.value(x).as_matrix_dims();
        assert!(start <= end && end <= c, "slice_cols {start}..{end} of width {c}");
        let w = end - start;
        let mut out = Vec::with_capacity(n * w);
        for row in self.value(x).data().chunks(c) {
            out.extend_from_slice(&row[start..end]);
        }
        self.push(
            Tensor::new(&[n, w], out),
            &[x],
            Box::new(move |ctx| {
                let mut g = Tensor::zeros(ctx.inputs[0].shape());
                for (dst, src) in g.data_mut().chunks_mut(c).zip(ctx.grad.data().chunks(w.max(1))) {
                    dst[start..end].copy_from_slice(&src[..w]);
                }
                vec![Some(g)]
            }),
        )
    }

    /// Stack vars along the leading axis (flattened to `[rows, c]` blocks).
    pub fn concat_rows(&mut self, xs: &[Var]) -> Var {
        let c = self.value(xs[0]).as_matrix_dims().1;
        let lens: Vec<usize> = xs.iter().map(|&x| self.value(x).len()).collect();
        let mut out = Vec::with_capacity(lens.iter().sum());
        for &x in xs {
            assert_eq!(self.value(x).as_matrix_dims().1, c, "concat_rows width mismatch");
            out.extend_from_slice(self.value(x).data());
        }
        let rows = out.len() / c.max(1);
        self.push(
            Tensor::new(&[rows, c], out),
            xs,
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut off = 0;
                lens.iter()
                    .enumerate()
                    .map(|(k, &l)| {
                        let r = ctx.needs[k]
                            .then(|| Tensor::new(ctx.inputs[k].shape(), g[off..off + l].to_vec()));
                        off += l;
                        r
                    })
                    .collect()
            }),
        )
    }

    /// Rows `start..end` of a var viewed as `[rows, c]`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let (r, c) = self.value(x).as_matrix_dims();
        assert!(start <= end && end <= r, "slice_rows {start}..{end} of {r}");
        let out = self.value(x).data()[start * c..end * c].to_vec();
        self.push(
            Tensor::new(&[end - start, c], out),
            &[x],
            Box::new(move |ctx| {
                let mut g = Tensor::zeros(ctx.inputs[0].shape());
                g.data_mut()[start * c..end * c].copy_from_slice(ctx.grad.data());
                vec![Some(g)]
            }),
        )
    }

    // ---- linear algebra ----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_ex(a, b, false, false)
    }

    /// `op(a) · op(b)` where `op` optionally transposes a stored 2-D matrix.
    pub fn matmul_ex(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (ar, ac) = self.value(a).as_matrix_dims();
        let (br, bc) = self.value(b).as_matrix_dims();
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let out = gemm(self.value(a).data(), self.value(b).data(), m, k, n, ta, tb);
        self.push(
            Tensor::new(&[m, n], out),
            &[a, b],
            Box::new(move |c| {
                let (av, bv, g) = (c.inputs[0].data(), c.inputs[1].data(), c.grad.data());
                let ga = c.needs[0].then(|| {
                    let d = if ta { gemm(bv, g, k, n, m, tb, true) } else { gemm(g, bv, m, n, k, false, !tb) };
                    Tensor::new(c.inputs[0].shape(), d)
                });
                let gb = c.needs[1].then(|| {
                    let d = if tb { gemm(g, av, n, m, k, true, ta) } else { gemm(av, g, k, m, n, !ta, false) };
                    Tensor::new(c.inputs[1].shape(), d)
                });
                vec![ga, gb]
            }),
        )
    }

    /// 2-D convolution of a single `[C, H, W]` image with `[O, C, k, k]` weights.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 3, "conv2d input must be [C,H,W], got {xs:?}");
        assert_eq!(ws.len(), 4, "conv2d weight must be [O,C,k,k], got {ws:?}");
        assert_eq!(xs[0], ws[1], "conv2d channel mismatch {xs:?} vs {ws:?}");
        let geom = ConvGeom { channels: xs[0], height: xs[1], width: xs[2], kernel: ws[2], stride, pad };
        let (o, ho, wo) = (ws[0], geom.out_height(), geom.out_width());
        let cols = im2col(self.value(x).data(), geom);
        let p = geom.patch_len();
        let mut out = gemm(self.value(w).data(), &cols, o, p, ho * wo, false, false);
        if let Some(b) = bias {
            for (row, bv) in out.chunks_mut(ho * wo).zip(self.value(b).data()) {
                for v in row {
                    *v += bv;
                }
            }
        }
        let parents: Vec<Var> = match bias {
            Some(b) => vec![x, w, b],
            None => vec![x, w],
        };
        self.push(
            Tensor::new(&[o, ho, wo], out),
            &parents,
            Box::new(move |c| {
                let g = c.grad.data();
                let hw = ho * wo;
                let gx = c.needs[0].then(|| {
                    let dcols = gemm(c.inputs[1].data(), g, p, o, hw, true, false);
                    Tensor::new(c.inputs[0].shape(), col2im(&dcols, geom))
                });
                let gw = c.needs[1].then(|| {
                    let cols = im2col(c.inputs[0].data(), geom);
                    Tensor::new(c.inputs[1].shape(), gemm(g, &cols, o, hw, p, false, true))
                });
                let mut res = vec![gx, gw];
                if c.inputs.len() == 3 {
                    res.push(c.needs[2].then(|| {
                        Tensor::new(&[o], g.chunks(hw).map(|r| r.iter().sum()).collect())
                    }));
                }
                res
            }),
        )
    }

    /// Average pooling of `[C, H, W]` by an integer factor.
    pub fn avg_pool(&mut self, x: Var, factor: usize) -> Var {
        let s = self.value(x).shape().to_vec();
        let (c, h, w) = (s[0], s[1], s[2]);
        assert!(h % factor == 0 && w % factor == 0, "avg_pool {s:?} by {factor}");
        let (ho, wo) = (h / factor, w / factor);
        let inv = 1.0 / (factor * factor) as f64;
        let xv = self.value(x).data();
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    out[(ch * ho + i / factor) * wo + j / factor] += xv[(ch * h + i) * w + j] * inv;
                }
            }
        }
        self.push(
            Tensor::new(&[c, ho, wo], out),
            &[x],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut gx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for i in 0..h {
                        for j in 0..w {
                            gx[(ch * h + i) * w + j] = g[(ch * ho + i / factor) * wo + j / factor] * inv;
                        }
                    }
                }
                vec![Some(Tensor::new(&[c, h, w], gx))]
            }),
        )
    }

    /// Nearest-neighbour upsampling of `[C, H, W]` by an integer factor.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Var {
        let s = self.value(x).shape().to_vec();
        let (c, h, w) = (s[0], s[1], s[2]);
        let (ho, wo) = (h * factor, w * factor);
        let xv = self.value(x).data();
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    out[(ch * ho + i) * wo + j] = xv[(ch * h + i / factor) * w + j / factor];
                }
            }
        }
        self.push(
            Tensor::new(&[c, ho, wo], out),
            &[x],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut gx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for i in 0..ho {
                        for j in 0..wo {
                            gx[(ch * h + i / factor) * w + j / factor] += g[(ch * ho + i) * wo + j];
                        }
                    }
                }
                vec![Some(Tensor::new(&[c, h, w], gx))]
            }),
        )
    }

    /// Edge-replicating padding of `[C, H, W]` by `p` pixels on every side.
    pub fn pad_replicate(&mut self, x: Var, p: usize) -> Var {
        let s = self.value(x).shape().to_vec();
        let (c, h, w) = (s[0], s[1], s[2]);
        let (ho, wo) = (h + 2 * p, w + 2 * p);
        let src = move |i: usize, j: usize| (i.saturating_sub(p).min(h - 1), j.saturating_sub(p).min(w - 1));
        let xv = self.value(x).data();
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    let (si, sj) = src(i, j);
                    out[(ch * ho + i) * wo + j] = xv[(ch * h + si) * w + sj];
                }
            }
        }
        self.push(
            Tensor::new(&[c, ho, wo], out),
            &[x],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut gx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for i in 0..ho {
                        for j in 0..wo {
                            let (si, sj) = src(i, j);
                            gx[(ch * h + si) * w + sj] += g[(ch * ho + i) * wo + j];
                        }
                    }
                }
                vec![Some(Tensor::new(&[c, h, w], gx))]
            }),
        )
    }

    /// Bilinear lookup of a `[C, H, W]` feature map at normalized coordinates.
    ///
    /// Coordinates follow the align-corners-false convention: `u = -1` is the
    /// left edge of the first pixel, pixel centre `j` sits at `(2j + 1)/W - 1`.
    /// Taps outside the map, and points flagged invalid, contribute zero.
    /// Returns `[n, C]`.
    pub fn grid_sample(&mut self, fmap: Var, uv: &[[f64; 2]], valid: &[bool]) -> Var {
        let s = self.value(fmap).shape().to_vec();
        let (c, h, w) = (s[0], s[1], s[2]);
        let hw = h * w;
        let taps: Vec<Taps> = uv
            .iter()
            .zip(valid)
            .map(|(p, &ok)| if ok { bilinear_taps(p[0], p[1], h, w) } else { Taps::default() })
            .collect();
        let n = taps.len();
        let fv = self.value(fmap).data();
        let mut out = vec![0.0; n * c];
        for (i, t) in taps.iter().enumerate() {
            for k in 0..4 {
                if t.w[k] == 0.0 {
                    continue;
                }
                for ch in 0..c {
                    out[i * c + ch] += t.w[k] * fv[ch * hw + t.idx[k]];
                }
            }
        }
        self.push(
            Tensor::new(&[n, c], out),
            &[fmap],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut gf = vec![0.0; c * hw];
                for (i, t) in taps.iter().enumerate() {
                    for k in 0..4 {
                        if t.w[k] == 0.0 {
                            continue;
                        }
                        for ch in 0..c {
                            gf[ch * hw + t.idx[k]] += t.w[k] * g[i * c + ch];
                        }
                    }
                }
                vec![Some(Tensor::new(&[c, h, w], gf))]
            }),
        )
    }

    // ---- volume rendering --------------------------------------------

    /// Alpha-compositing weights `T_i (1 - exp(-sigma_i delta_i))` per ray.
    ///
    /// `sigma` is `[R, N]`; `deltas` holds the constant bin widths.
    pub fn composite(&mut self, sigma: Var, deltas: &Tensor) -> Var {
        let (r, n) = self.value(sigma).as_matrix_dims();
        assert_eq!(deltas.len(), r * n, "composite deltas shape");
        let (weights, _) = crate::rendering::composite_weights(self.value(sigma).data(), deltas.data(), n);
        let deltas = deltas.data().to_vec();
        self.push(
            Tensor::new(&[r, n], weights),
            &[sigma],
            Box::new(move |ctx| {
                let (g, s, w) = (ctx.grad.data(), ctx.inputs[0].data(), ctx.out.data());
                let mut gs = vec![0.0; r * n];
                for ray in 0..r {
                    let base = ray * n;
                    let mut trans = 1.0;
                    let mut tail: f64 = (0..n).map(|i| g[base + i] * w[base + i]).sum();
                    for i in 0..n {
                        let a = s[base + i] * deltas[base + i];
                        let e = (-a).exp();
                        tail -= g[base + i] * w[base + i];
                        gs[base + i] = deltas[base + i] * (g[base + i] * trans * e - tail);
                        trans *= e;
                    }
                }
                vec![Some(Tensor::new(&[r, n], gs))]
            }),
        )
    }

    /// Per-ray weighted sum: `weights[R, N]`, `values[R*N, K]` -> `[R, K]`.
    pub fn ray_sum(&mut self, weights: Var, values: Var) -> Var {
        let (r, n) = self.value(weights).as_matrix_dims();
        let (vr, k) = self.value(values).as_matrix_dims();
        assert_eq!(vr, r * n, "ray_sum expects {} value rows, got {vr}", r * n);
        let (wv, vv) = (self.value(weights).data(), self.value(values).data());
        let mut out = vec![0.0; r * k];
        for ray in 0..r {
            for i in 0..n {
                let wi = wv[ray * n + i];
                let row = &vv[(ray * n + i) * k..(ray * n + i + 1) * k];
                for (o, v) in out[ray * k..(ray + 1) * k].iter_mut().zip(row) {
                    *o += wi * v;
                }
            }
        }
        self.push(
            Tensor::new(&[r, k], out),
            &[weights, values],
            Box::new(move |ctx| {
                let (g, wv, vv) = (ctx.grad.data(), ctx.inputs[0].data(), ctx.inputs[1].data());
                let gw = ctx.needs[0].then(|| {
                    let mut d = vec![0.0; r * n];
                    for ray in 0..r {
                        let gr = &g[ray * k..(ray + 1) * k];
                        for i in 0..n {
                            let row = &vv[(ray * n + i) * k..(ray * n + i + 1) * k];
                            d[ray * n + i] = gr.iter().zip(row).map(|(a, b)| a * b).sum();
                        }
                    }
                    Tensor::new(ctx.inputs[0].shape(), d)
                });
                let gv = ctx.needs[1].then(|| {
                    let mut d = vec![0.0; r * n * k];
                    for ray in 0..r {
                        let gr = &g[ray * k..(ray + 1) * k];
                        for i in 0..n {
                            let wi = wv[ray * n + i];
                            for (o, gg) in d[(ray * n + i) * k..(ray * n + i + 1) * k].iter_mut().zip(gr) {
                                *o = wi * gg;
                            }
                        }
                    }
                    Tensor::new(ctx.inputs[1].shape(), d)
                });
                vec![gw, gv]
            }),
        )
    }

    // ---- backward ----------------------------------------------------

    /// Gradients of the scalar `loss` with respect to every tracked node.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Grads { grads };
        }
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape(), vec![1.0]));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(back) = &node.back else { continue };
            let Some(g) = grads[i].take() else { continue };
            let ctx = Ctx {
                grad: &g,
                out: &node.value,
                inputs: node.parents.iter().map(|&p| &self.nodes[p].value).collect(),
                needs: node.parents.iter().map(|&p| self.nodes[p].requires_grad).collect(),
            };
            let pg = back(&ctx);
            for (&p, pg) in node.parents.iter().zip(pg) {
                if !self.nodes[p].requires_grad {
                    continue;
                }
                if let Some(pg) = pg {
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&pg),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            // keep leaf gradients, intermediate ones are no longer needed
            if node.parents.is_empty() {
                grads[i] = Some(g);
            }
        }
        Grads { grads }
    }

    /// Gradients for every parameter of `set` used in this graph, in parameter order.
    pub fn param_grads(&self, grads: &Grads, set: &ParamSet) -> Vec<Option<Tensor>> {
        (0..set.len())
            .map(|i| self.params.get(&(set.uid(), i)).and_then(|v| grads.get(*v).cloned()))
            .collect()
    }
}

pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    /// Gradient of a leaf var (intermediate grads are released during the sweep).
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Outcome of [`check_gradients`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradientCheck {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_relative_error: f64,
    /// `(input, element)` where the largest error occurred.
    pub worst: (usize, usize),
    pub n_checked: usize,
}

/// Compare reverse-mode gradients of the scalar `f(inputs)` with central
/// differences of step `h`, elementwise over every input.
///
/// Gradients smaller than `floor` in magnitude are compared absolutely.
pub fn check_gradients(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Var, h: f64, floor: f64) -> GradientCheck {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars);
    assert_eq!(g.value(out).len(), 1, "gradient check needs a scalar output");
    let grads = g.backward(out);
    let mut report = GradientCheck { max_relative_error: 0.0, worst: (0, 0), n_checked: 0 };
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        for i in 0..t.len() {
            let eval = |delta: f64| {
                let mut g = Graph::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, u)| {
                        let mut u = u.clone();
                        if j == k {
                            u.data_mut()[i] += delta;
                        }
                        g.constant(u)
                    })
                    .collect();
                let o = f(&mut g, &vs);
                g.value(o).item()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(floor);
            if !(err <= report.max_relative_error) {
                report.max_relative_error = err;
                report.worst = (k, i);
            }
            report.n_checked += 1;
        }
    }
    report
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

fn bilinear_taps(u: f64, v: f64, h: usize, w: usize) -> Taps {
    let px = ((u + 1.0) * w as f64 - 1.0) / 2.0;
    let py = ((v + 1.0) * h as f64 - 1.0) / 2.0;
    let (x0, y0) = (px.floor(), py.floor());
    let (fx, fy) = (px - x0, py - y0);
    let mut t = Taps::default();
    let corners = [(0.0, 0.0, (1.0 - fx) * (1.0 - fy)), (1.0, 0.0, fx * (1.0 - fy)), (0.0, 1.0, (1.0 - fx) * fy), (1.0, 1.0, fx * fy)];
    for (k, (dx, dy, wt)) in corners.into_iter().enumerate() {
        let (xi, yi) = (x0 + dx, y0 + dy);
        if xi >= 0.0 && yi >= 0.0 && (xi as usize) < w && (yi as usize) < h && wt != 0.0 {
            t.idx[k] = yi as usize * w + xi as usize;
            t.w[k] = wt;
        }
    }
    t
}
