//! Reverse-mode autodiff over `ndarray` tensors.
//!
//! A [`Tape`] records every operation of a forward pass; [`Tape::backward`]
//! replays it in reverse and accumulates gradients for every node that
//! requires them. Values are `f64` throughout so analytic gradients can be
//! validated against central finite differences at tight tolerances.
//!
//! The tape also keeps a multiply-accumulate counter (`macs`) incremented by
//! every arithmetic op during the forward pass. The profiler audits its
//! analytic cost formulas against this counter.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use ndarray::{Array1, Array2, ArrayD, ArrayView2, Axis, Ix1, Ix2, IxDyn};

/// Handle to a node on a [`Tape`]. Only valid for the tape that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type GradSink<'a> = dyn FnMut(usize, ArrayD<f64>) + 'a;
type GradFn = Box<dyn Fn(&ArrayD<f64>, &mut GradSink)>;

struct Node {
    value: Rc<ArrayD<f64>>,
    requires_grad: bool,
    grad_fn: Option<GradFn>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    slots: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, if `v` required one and was reached.
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.slots.get(v.0).and_then(|s| s.as_ref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    macs: Cell<u64>,
}

fn as2(a: &ArrayD<f64>) -> ArrayView2<'_, f64> {
    a.view()
        .into_dimensionality::<Ix2>()
        .expect("expected a rank-2 tensor")
}

fn to_dyn2(a: Array2<f64>) -> ArrayD<f64> {
    a.into_dyn()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Multiply-accumulate operations recorded since construction (or the
    /// last [`Tape::reset_macs`]). Forward pass only.
    pub fn macs(&self) -> u64 {
        self.macs.get()
    }

    pub fn reset_macs(&self) {
        self.macs.set(0);
    }

    fn count_macs(&self, n: u64) {
        self.macs.set(self.macs.get() + n);
    }

    fn push(&self, value: ArrayD<f64>, requires_grad: bool, grad_fn: Option<GradFn>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            grad_fn,
        });
        Var(nodes.len() - 1)
    }

    /// Value that never receives a gradient (inputs, teacher targets, ...).
    pub fn constant(&self, value: ArrayD<f64>) -> Var {
        self.push(value, false, None)
    }

    /// Leaf tensor; gradients accumulate here when `requires_grad` is set.
    pub fn leaf(&self, value: ArrayD<f64>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, None)
    }

    pub fn value(&self, v: Var) -> Rc<ArrayD<f64>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Scalar value of a single-element tensor.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "scalar() on a tensor with {} elements", val.len());
        val.iter().next().copied().unwrap()
    }

    // ---- elementwise -------------------------------------------------------

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "add: shape mismatch");
        let out = &*av + &*bv;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let gf: Option<GradFn> = rg.then(|| {
            Box::new(move |g: &ArrayD<f64>, sink: &mut GradSink| {
                sink(a.0, g.clone());
                sink(b.0, g.clone());
            }) as GradFn
        });
        self.push(out, rg, gf)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "sub: shape mismatch");
        let out = &*av - &*bv;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let gf: Option<GradFn> = rg.then(|| {
            Box::new(move |g: &ArrayD<f64>, sink: &mut GradSink| {
                sink(a.0, g.clone());
                sink(b.0, -g);
            }) as GradFn
        });
        self.push(out, rg, gf)
    }

    pub fn neg(&self, a: Var) -> Var {
        let av = self.value(a);
        let out = -&*av;
        let rg = self.requires_grad(a);
        let gf: Option<GradFn> = rg.then(|| {
            Box::new(move |g: &ArrayD<f64>, sink: &mut GradSink| sink(a.0, -g)) as GradFn
        });
        self.push(out, rg, gf)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mul: shape mismatch");
        let out = &*av * &*bv;
        self.count_macs(out.len() as u64);
        let (rga, rgb) = (self.requires_grad(a), self.requires_grad(b));
        let gf: Option<GradFn> = (rga || rgb).then(|| {
            let (ac, bc) = (Rc::clone(&av), Rc::clone(&bv));
            Box::new(move |g: &ArrayD<f64>, sink: &mut GradSink| {
                if rga {
                    sink(a.0, g * &*bc);
                }
                if rgb {
                    sink(b.0, g * &*ac);
                }
            }) as GradFn
        });
        self.push(out, rga || rgb, gf)
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "div: shape mismatch");
        let out = &*av / &*bv;
        self.count_macs(out.len() as u64);
        let (rga, rgb) = (self.requires_grad(a), self.requires_grad(b));
        let gf: Option<GradFn> = (rga || rgb).then(|| {
            let (ac, bc) = (Rc::clone(&av), Rc::clone(&bv));
            Box::new(move |g: &ArrayD<f64>, sink: &mut GradSink| {
                if rga {
                    sink(a.0, g / &*bc);
                }
                if rgb {
                    sink(b.0, -(g * &*ac) / (&*bc * &*bc));
                }
            }) as GradFn
        });
        self.push(out, rga || rgb, gf)
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let av = self.value(a);
        let out = &*av * c;
        self.count_macs(out.len() as u64);
        let rg = self.requires_grad(a);
        let gf: Option<GradFn> = rg.then(|| {
            Box::new(move |g: &ArrayD<f64>, sink: &mut GradSink| sink(a.0, g * c)) as GradFn
        });
        self.push(out, rg, gf)
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        let av = self.value(a);
        let out = &*av + c;
        let rg = self.requires_grad(a);
        let gf: Option<GradFn> = rg.then(|| {
            Box::new(move |g: &ArrayD<f64>, sink: &mut GradSink| sink(a.0, g.clone())) as GradFn
        });
        self.push(out, rg, gf)
    }

    /// `sqrt` with a zero subgradient at the origin so zero-norm rows do not
    /// produce infinities.
    pub fn sqrt_guard(&self, a: Var) -> Var {
        let av = self.value(a);
        let out = av.mapv(f64::sqrt);
        let rg = self.requires_grad(a);
        let gf: Option<GradFn> = rg.then(|| {
            let yc = out.clone();
            Box::new(move |g: &ArrayD<f64>, sink: &mut GradSink| {
                let mut dx = g.clone();
                dx.zip_mut_with(&yc, |d, &y| {
                    *d = if y > 0.0 { *d * 0.5 / y } else { 0.0 };
                });
                sink(a.0, dx);
            }) as GradFn
        });
        self.push(out, rg, gf)
    }

    /// SiLU activation `x * sigmoid(x)`.
    pub fn silu(&self, a: Var) -> Var {
        let av = self.value(a);
        let out = av.mapv(|x| x * sigmoid(x));
        self.count_macs(out.len() as u64);
        let rg = self.requires_grad(a);
        let gf: Option<GradFn> = rg.then(|| {
            let xc = Rc::clone(&av);
            Box::new(move |g: &ArrayD<f64>, sink: &mut GradSink| {
                let mut dx = g.clone();
                dx.zip_mut_with(&xc, |d, &x| {
                    let s = sigmoid(x);
                    *d *= s * (1.0 + x * (1.0 - s));
                });
                sink(a.0, dx);
            }) as GradFn
        });
        self.push(out, rg, gf)
    }

    // ---- broadcast over the last axis --------------------------------------

    /// `a + b` where `b` is a vector broadcast across the last axis of `a`.
    pub fn add_bias(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let d = *av.shape().last().expect("add_bias: empty shape");
        assert_eq!(bv.shape(), [d], "add_bias: bias must be [last_dim]");
        let bvec = bv.view().into_dimensionality::<Ix1>().unwrap();
        let mut out = (*av).clone();
        for mut lane in out.rows_mut() {
            lane += &bvec;
        }
        let (rga, rgb) = (self.requires_grad(a), self.requires_grad(b));
        let gf: Option<GradFn> = (rga || rgb).then(|| {
            Box::new(move |g: &ArrayD<f64>, sink: &mut GradSink| {
                if rga {
                    sink(a.0, g.clone());
                }
                if rgb {
                    let mut db = Array1::<f64>::zeros(d);
                    for lane in g.rows() {
                        db += &lane;
                    }
                    sink(b.0, db.into_dyn());
                }
            }) as GradFn
        });
        self.push(out, rga || rgb, gf)
    }

    /// `a * v` with `v` broadcast across the last axis of `a`.
    pub fn mul_lastdim(&self, a: Var, v: Var) -> Var {
        let (av, vv) = (self.value(a), self.value(v));
        let d = *av.shape().last().expect("mul_lastdim: empty shape");
        assert_eq!(vv.shape(), [d], "mul_lastdim: vector must be [last_dim]");
        let vvec = vv.view().into_dimensionality::<Ix1>().unwrap();
        let mut out = (*av).clone();
        for mut lane in out.rows_mut() {
            lane *= &vvec;
        }
        self.count_macs(out.len() as u64);
        let (rga, rgv) = (self.requires_grad(a), self.requires_grad(v));
        let gf: Option<GradFn> = (rga || rgv).then(|| {
            let (ac, vc) = (Rc::clone(&av), Rc::clone(&vv));
            Box::new(move |g: &ArrayD<f64>, sink: &mut GradSink| {
                if rga {
                    let vvec = vc.view().into_dimensionality::<Ix1>().unwrap();
                    let mut da = g.clone();
                    for mut lane in da.rows_mut() {
                        lane *= &vvec;
                    }
                    sink(a.0, da);
                }
                if rgv {
                    let mut dv = Array1::<f64>::zeros(d);
                    for (glane, alane) in g.rows().into_iter().zip(ac.rows()) {
                        dv.zip_mut_with(&(&glane * &alane), |s, &x| *s += x);
                    }
                    sink(v.0, dv.into_dyn());
                }
            }) as GradFn
        });
        self.push(out, rga || rgv, gf)
    }

    // ---- linear algebra -----------------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (a2, b2) = (as2(&av), as2(&bv));
        assert_eq!(a2.ncols(), b2.nrows(), "matmul: inner dims differ");
        let out = a2.dot(&b2);
        self.count_macs((a2.nrows() * a2.ncols() * b2.ncols()) as u64);
        let (rga, rgb) = (self.requires_grad(a), self.requires_grad(b));
        let gf: Option<GradFn> = (rga || rgb).then(|| {
            let (ac, bc) = (Rc::clone(&av), Rc::clone(&bv));
            Box::new(move |g: &ArrayD<f64>, sink: &mut GradSink| {
                let g2 = as2(g);
                if rga {
                    sink(a.0, to_dyn2(g2.dot(&as2(&bc).t())));
                }
                if rgb {
                    sink(b.0, to_dyn2(as2(&ac).t().dot(&g2)));
                }
            }) as GradFn
        });
        self.push(to_dyn2(out), rga || rgb, gf)
    }

    pub fn transpose2(&self, a: Var) -> Var {
        let av = self.value(a);
        let out = as2(&av).t().to_owned();
        let rg = self.requires_grad(a);
        let gf: Option<GradFn> = rg.then(|| {
            Box::new(move |g: &ArrayD<f64>, sink: &mut GradSink| {
                sink(a.0, to_dyn2(as2(g).t().to_owned()));
            }) as GradFn
        });
        self.push(to_dyn2(out), rg, gf)
    }

    /// Per-row dot product of two `[n, d]` tensors, yielding `[n]`.
    pub fn rows_dot(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "rows_dot: shape mismatch");
        let (a2, b2) = (as2(&av), as2(&bv));
        let out: Array1<f64> = a2
            .rows()
            .into_iter()
            .zip(b2.rows())
            .map(|(x, y)| x.dot(&y))
            .collect();
        self.count_macs(av.len() as u64);
        let (rga, rgb) = (self.requires_grad(a), self.requires_grad(b));
        let gf: Option<GradFn> = (rga || rgb).then(|| {
            let (ac, bc) = (Rc::clone(&av), Rc::clone(&bv));
            Box::new(move |g: &ArrayD<f64>, sink: &mut GradSink| {
                let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                if rga {
                    let mut da = as2(&bc).to_owned();
                    for (mut lane, &gi) in da.rows_mut().into_iter().zip(g1.iter()) {
                        lane *= gi;
                    }
                    sink(a.0, to_dyn2(da));
                }
                if rgb {
                    let mut db = as2(&ac).to_owned();
                    for (mut lane, &gi) in db.rows_mut().into_iter().zip(g1.iter()) {
                        lane *= gi;
                    }
                    sink(b.0, to_dyn2(db));
                }
            }) as GradFn
        });
        self.push(out.into_dyn(), rga || rgb, gf)
    }

    // ---- structural ---------------------------------------------------------

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let av = self.value(a);
        let numel: usize = shape.iter().product();
        assert_eq!(av.len(), numel, "reshape: element count mismatch");
        let flat: Vec<f64> = av.iter().copied().collect();
        let out = ArrayD::from_shape_vec(IxDyn(shape), flat).unwrap();
        let rg = self.requires_grad(a);
        let parent_shape = av.shape().to_vec();
        let gf: Option<GradFn> = rg.then(|| {
            Box::new(move |g: &ArrayD<f64>, sink: &mut GradSink| {
                let flat: Vec<f64> = g.iter().copied().collect();
                sink(
                    a.0,
                    ArrayD::from_shape_vec(IxDyn(&parent_shape), flat).unwrap(),
                );
            }) as GradFn
        });
        self.push(out, rg, gf)
    }

    pub fn concat(&self, axis: usize, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat: no parts");
        let vals: Vec<Rc<ArrayD<f64>>> = parts.iter().map(|&p| self.value(p)).collect();
        let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).expect("concat: incompatible shapes");
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        let gf: Option<GradFn> = rg.then(|| {
            let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
            let lens: Vec<usize> = vals.iter().map(|v| v.shape()[axis]).collect();
            let rgs: Vec<bool> = parts.iter().map(|&p| self.requires_grad(p)).collect();
            Box::new(move |g: &ArrayD<f64>, sink: &mut GradSink| {
                let mut start = 0usize;
                for ((&id, &len), &want) in ids.iter().zip(&lens).zip(&rgs) {
                    if want {
                        let piece = g
                            .slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
                            .to_owned();
                        sink(id, piece);
                    }
                    start += len;
                }
            }) as GradFn
        });
        self.push(out, rg, gf)
    }

    /// Columns `[start, start+len)` of a rank-2 tensor.
    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let a2 = as2(&av);
        assert!(start + len <= a2.ncols(), "slice_cols: out of range");
        let out = a2.slice(ndarray::s![.., start..start + len]).to_owned();
        let rg = self.requires_grad(a);
        let (n, m) = (a2.nrows(), a2.ncols());
        let gf: Option<GradFn> = rg.then(|| {
            Box::new(move |g: &ArrayD<f64>, sink: &mut GradSink| {
                let mut da = Array2::<f64>::zeros((n, m));
                da.slice_mut(ndarray::s![.., start..start + len])
                    .assign(&as2(g));
                sink(a.0, to_dyn2(da));
            }) as GradFn
        });
        self.push(to_dyn2(out), rg, gf)
    }

    /// Row gather from a `[n, d]` tensor. Repeated indices accumulate in the
    /// backward scatter.
    pub fn gather_rows(&self, a: Var, indices: &[usize]) -> Var {
        let av = self.value(a);
        let a2 = as2(&av);
        let d = a2.ncols();
        let mut out = Array2::<f64>::zeros((indices.len(), d));
        for (k, &i) in indices.iter().enumerate() {
            assert!(i < a2.nrows(), "gather_rows: index {i} out of range");
            out.row_mut(k).assign(&a2.row(i));
        }
        let rg = self.requires_grad(a);
        let (n, idx) = (a2.nrows(), indices.to_vec());
        let gf: Option<GradFn> = rg.then(|| {
            Box::new(move |g: &ArrayD<f64>, sink: &mut GradSink| {
                let g2 = as2(g);
                let mut da = Array2::<f64>::zeros((n, d));
                for (k, &i) in idx.iter().enumerate() {
                    let mut row = da.row_mut(i);
                    row += &g2.row(k);
                }
                sink(a.0, to_dyn2(da));
            }) as GradFn
        });
        self.push(to_dyn2(out), rg, gf)
    }

    /// `out[i] = a[i, ids[i]]` for a `[n, v]` tensor.
    pub fn select_positions(&self, a: Var, ids: &[usize]) -> Var {
        let av = self.value(a);
        let a2 = as2(&av);
        assert_eq!(a2.nrows(), ids.len(), "select_positions: row count mismatch");
        let out: Array1<f64> = ids
            .iter()
            .enumerate()
            .map(|(i, &j)| {
                assert!(j < a2.ncols(), "select_positions: column {j} out of range");
                a2[[i, j]]
            })
            .collect();
        let rg = self.requires_grad(a);
        let (n, v, idx) = (a2.nrows(), a2.ncols(), ids.to_vec());
        let gf: Option<GradFn> = rg.then(|| {
            Box::new(move |g: &ArrayD<f64>, sink: &mut GradSink| {
                let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                let mut da = Array2::<f64>::zeros((n, v));
                for (i, &j) in idx.iter().enumerate() {
                    da[[i, j]] += g1[i];
                }
                sink(a.0, to_dyn2(da));
            }) as GradFn
        });
        self.push(out.into_dyn(), rg, gf)
    }

    /// Shift a `[T, h, w, d]` tensor by `(dt, di, dj)` with zero fill:
    /// `out[t, i, j] = a[t+dt, i+di, j+dj]` where in bounds.
    pub fn shift3(&self, a: Var, dt: isize, di: isize, dj: isize) -> Var {
        let av = self.value(a);
        assert_eq!(av.ndim(), 4, "shift3: expected rank-4 tensor");
        let out = shift3_array(&av, dt, di, dj);
        let rg = self.requires_grad(a);
        let gf: Option<GradFn> = rg.then(|| {
            Box::new(move |g: &ArrayD<f64>, sink: &mut GradSink| {
                sink(a.0, shift3_array(g, -dt, -di, -dj));
            }) as GradFn
        });
        self.push(out, rg, gf)
    }

    // ---- softmax family -----------------------------------------------------

    /// Row-wise softmax over unmasked key columns; masked columns get weight
    /// exactly 0.0. The caller guarantees at least one unmasked column.
    pub fn masked_softmax_rows(&self, a: Var, mask: &[bool]) -> Var {
        let av = self.value(a);
        let a2 = as2(&av);
        assert_eq!(a2.ncols(), mask.len(), "masked_softmax_rows: mask length");
        assert!(mask.iter().any(|&m| m), "masked_softmax_rows: empty mask");
        let mut out = Array2::<f64>::zeros(a2.raw_dim());
        for (mut orow, arow) in out.rows_mut().into_iter().zip(a2.rows()) {
            softmax_masked_into(&arow.to_vec(), mask, orow.as_slice_mut().unwrap());
        }
        let rg = self.requires_grad(a);
        let gf: Option<GradFn> = rg.then(|| {
            let yc = out.clone();
            Box::new(move |g: &ArrayD<f64>, sink: &mut GradSink| {
                sink(a.0, to_dyn2(softmax_backward(&as2(g).to_owned(), &yc)));
            }) as GradFn
        });
        self.push(to_dyn2(out), rg, gf)
    }

    /// Softmax over `j <= i` for a square score matrix (decoder attention).
    pub fn causal_softmax(&self, a: Var) -> Var {
        let av = self.value(a);
        let a2 = as2(&av);
        assert_eq!(a2.nrows(), a2.ncols(), "causal_softmax: square input");
        let n = a2.nrows();
        let mut out = Array2::<f64>::zeros((n, n));
        let mut mask = vec![false; n];
        for i in 0..n {
            mask[i] = true;
            softmax_masked_into(
                &a2.row(i).to_vec(),
                &mask,
                out.row_mut(i).as_slice_mut().unwrap(),
            );
        }
        let rg = self.requires_grad(a);
        let gf: Option<GradFn> = rg.then(|| {
            let yc = out.clone();
            Box::new(move |g: &ArrayD<f64>, sink: &mut GradSink| {
                sink(a.0, to_dyn2(softmax_backward(&as2(g).to_owned(), &yc)));
            }) as GradFn
        });
        self.push(to_dyn2(out), rg, gf)
    }

    /// Numerically stable row-wise log-softmax.
    pub fn log_softmax_rows(&self, a: Var) -> Var {
        let av = self.value(a);
        let a2 = as2(&av);
        let mut out = a2.to_owned();
        for mut row in out.rows_mut() {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        let rg = self.requires_grad(a);
        let gf: Option<GradFn> = rg.then(|| {
            let yc = out.clone();
            Box::new(move |g: &ArrayD<f64>, sink: &mut GradSink| {
                let g2 = as2(g);
                let mut da = g2.to_owned();
                for ((mut drow, grow), yrow) in
                    da.rows_mut().into_iter().zip(g2.rows()).zip(yc.rows())
                {
                    let gsum: f64 = grow.sum();
                    for (d, &y) in drow.iter_mut().zip(yrow.iter()) {
                        *d -= y.exp() * gsum;
                    }
                }
                sink(a.0, to_dyn2(da));
            }) as GradFn
        });
        self.push(to_dyn2(out), rg, gf)
    }

    /// Row-wise layer normalization with learnable gain and bias.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let x2 = as2(&xv);
        let d = x2.ncols();
        assert_eq!(gv.shape(), [d], "layer_norm: gamma shape");
        assert_eq!(bv.shape(), [d], "layer_norm: beta shape");
        let g1 = gv.view().into_dimensionality::<Ix1>().unwrap();
        let b1 = bv.view().into_dimensionality::<Ix1>().unwrap();

        let mut xhat = Array2::<f64>::zeros(x2.raw_dim());
        let mut inv_std = Array1::<f64>::zeros(x2.nrows());
        let mut out = Array2::<f64>::zeros(x2.raw_dim());
        for (i, row) in x2.rows().into_iter().enumerate() {
            let mean = row.mean().unwrap();
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[i] = istd;
            for j in 0..d {
                let xh = (row[j] - mean) * istd;
                xhat[[i, j]] = xh;
                out[[i, j]] = xh * g1[j] + b1[j];
            }
        }
        self.count_macs(2 * (x2.nrows() * d) as u64);
        let (rgx, rgg, rgb) = (
            self.requires_grad(x),
            self.requires_grad(gamma),
            self.requires_grad(beta),
        );
        let rg = rgx || rgg || rgb;
        let gf: Option<GradFn> = rg.then(|| {
            let (xh, istd, gc) = (xhat.clone(), inv_std.clone(), g1.to_owned());
            Box::new(move |g: &ArrayD<f64>, sink: &mut GradSink| {
                let g2 = as2(g);
                if rgb {
                    let db = g2.sum_axis(Axis(0));
                    sink(beta.0, db.into_dyn());
                }
                if rgg {
                    let dg = (&g2 * &xh.view()).sum_axis(Axis(0));
                    sink(gamma.0, dg.into_dyn());
                }
                if rgx {
                    let mut dx = Array2::<f64>::zeros(g2.raw_dim());
                    for (i, grow) in g2.rows().into_iter().enumerate() {
                        let dy: Vec<f64> =
                            grow.iter().zip(gc.iter()).map(|(&gi, &ga)| gi * ga).collect();
                        let m1 = dy.iter().sum::<f64>() / d as f64;
                        let m2 = dy
                            .iter()
                            .zip(xh.row(i).iter())
                            .map(|(&a, &b)| a * b)
                            .sum::<f64>()
                            / d as f64;
                        for j in 0..d {
                            dx[[i, j]] = istd[i] * (dy[j] - m1 - xh[[i, j]] * m2);
                        }
                    }
                    sink(x.0, to_dyn2(dx));
                }
            }) as GradFn
        });
        self.push(to_dyn2(out), rg, gf)
    }

    // ---- reductions ---------------------------------------------------------

    pub fn sum_all(&self, a: Var) -> Var {
        let av = self.value(a);
        let out = ArrayD::from_elem(IxDyn(&[1]), av.sum());
        let rg = self.requires_grad(a);
        let shape = av.shape().to_vec();
        let gf: Option<GradFn> = rg.then(|| {
            Box::new(move |g: &ArrayD<f64>, sink: &mut GradSink| {
                sink(a.0, ArrayD::from_elem(IxDyn(&shape), g[[0]]));
            }) as GradFn
        });
        self.push(out, rg, gf)
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let av = self.value(a);
        let n = av.len() as f64;
        let out = ArrayD::from_elem(IxDyn(&[1]), av.sum() / n);
        let rg = self.requires_grad(a);
        let shape = av.shape().to_vec();
        let gf: Option<GradFn> = rg.then(|| {
            Box::new(move |g: &ArrayD<f64>, sink: &mut GradSink| {
                sink(a.0, ArrayD::from_elem(IxDyn(&shape), g[[0]] / n));
            }) as GradFn
        });
        self.push(out, rg, gf)
    }

    // ---- backward -----------------------------------------------------------

    /// Accumulate gradients of a scalar `root` w.r.t. every reachable node
    /// that requires a gradient.
    pub fn backward(&self, root: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[root.0].value.len(),
            1,
            "backward: root must be a scalar"
        );
        let mut slots: Vec<Option<ArrayD<f64>>> = vec![None; nodes.len()];
        slots[root.0] = Some(ArrayD::from_elem(IxDyn(&[1]), 1.0));
        for i in (0..=root.0).rev() {
            // leaves keep their slot for get(); interior grads are consumed
            if nodes[i].grad_fn.is_none() {
                continue;
            }
            let Some(grad) = slots[i].take() else { continue };
            let f = nodes[i].grad_fn.as_ref().unwrap();
            let mut sink = |p: usize, pg: ArrayD<f64>| {
                if !nodes[p].requires_grad {
                    return;
                }
                match &mut slots[p] {
                    Some(s) => *s += &pg,
                    slot @ None => *slot = Some(pg),
                }
            };
            f(&grad, &mut sink);
        }
        Gradients { slots }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Softmax over masked entries into `out`; masked entries become exactly 0.0.
fn softmax_masked_into(row: &[f64], mask: &[bool], out: &mut [f64]) {
    let mx = row
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&x, _)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (i, (&x, &m)) in row.iter().zip(mask).enumerate() {
        if m {
            let e = (x - mx).exp();
            out[i] = e;
            sum += e;
        } else {
            out[i] = 0.0;
        }
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    // restore exact zeros after the division (0/sum is already 0, but keep
    // the invariant explicit for masked lanes)
    for (o, &m) in out.iter_mut().zip(mask) {
        if !m {
            *o = 0.0;
        }
    }
}

/// dL/dx for y = softmax(x): y .* (g - sum(g .* y)) per row. Masked lanes have
/// y == 0 and therefore receive zero gradient.
fn softmax_backward(g: &Array2<f64>, y: &Array2<f64>) -> Array2<f64> {
    let mut dx = Array2::<f64>::zeros(g.raw_dim());
    for ((mut drow, grow), yrow) in dx.rows_mut().into_iter().zip(g.rows()).zip(y.rows()) {
        let dot: f64 = grow.iter().zip(yrow.iter()).map(|(&a, &b)| a * b).sum();
        for ((d, &gi), &yi) in drow.iter_mut().zip(grow.iter()).zip(yrow.iter()) {
            *d = yi * (gi - dot);
        }
    }
    dx
}

fn shift3_array(a: &ArrayD<f64>, dt: isize, di: isize, dj: isize) -> ArrayD<f64> {
    let s = a.shape();
    let (t, h, w, d) = (s[0] as isize, s[1] as isize, s[2] as isize, s[3]);
    let mut out = ArrayD::<f64>::zeros(IxDyn(s));
    for ot in 0..t {
        let it = ot + dt;
        if it < 0 || it >= t {
            continue;
        }
        for oi in 0..h {
            let ii = oi + di;
            if ii < 0 || ii >= h {
                continue;
            }
            for oj in 0..w {
                let ij = oj + dj;
                if ij < 0 || ij >= w {
                    continue;
                }
                for c in 0..d {
                    out[[ot as usize, oi as usize, oj as usize, c]] =
                        a[[it as usize, ii as usize, ij as usize, c]];
                }
            }
        }
    }
    out
}
