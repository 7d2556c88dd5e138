//! Minimal dense f64 tensor engine with reverse-mode automatic
//! differentiation.
//!
//! Design notes:
//!
//! * A [`Tensor`] is a cheap handle (`Rc`) to a value plus an optional
//!   backward-graph record (op tag + parent handles + closure). Graphs are
//!   rebuilt every optimization step and freed when the handles drop; there
//!   is no persistent tape.
//! * Shapes are explicit; there is no broadcasting beyond scalar-tensor
//!   [`Tensor::scale`]. Shape mismatches panic with the op tag and both
//!   shapes — they are programming errors, not runtime conditions.
//! * [`Tensor::backward`] walks the graph once in reverse topological
//!   order, so gradients of shared subexpressions accumulate additively.
//!   Calling it twice on the same loss panics (guards accidental
//!   accumulation across steps).
//! * Everything is serial and allocation-ordered: forward and backward are
//!   bit-reproducible for fixed inputs.
//!
//! The 3-D ops use channel-major layout `(C, X, Y, Z)` with z fastest:
//! `index = ((c*nx + x)*ny + y)*nz + z`.

use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

type BackwardFn = Box<dyn Fn(&[f64], &[Tensor])>;

struct Inner {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
    op: &'static str,
    backward_done: bool,
}

/// Dense f64 tensor with an optional autodiff node.
pub struct Tensor {
    inner: Rc<RefCell<Inner>>,
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Tensor { inner: Rc::clone(&self.inner) }
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        write!(
            f,
            "Tensor(op={}, shape={:?}, requires_grad={})",
            inner.op, inner.shape, inner.requires_grad
        )
    }
}

fn product(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn new_leaf(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: &'static str) -> Tensor {
        assert_eq!(
            data.len(),
            product(&shape),
            "{op}: data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            inner: Rc::new(RefCell::new(Inner {
                shape,
                data,
                requires_grad,
                grad: None,
                parents: Vec::new(),
                backward: None,
                op,
                backward_done: false,
            })),
        }
    }

    /// Trainable leaf.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new_leaf(shape.to_vec(), data, true, "param")
    }

    /// Non-trainable leaf.
    pub fn constant(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new_leaf(shape.to_vec(), data, false, "constant")
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::constant(&[1], vec![v])
    }

    fn node(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        op: &'static str,
        backward: BackwardFn,
    ) -> Tensor {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        if !requires_grad {
            return Tensor::new_leaf(shape, data, false, op);
        }
        assert_eq!(data.len(), product(&shape), "{op}: bad output buffer");
        Tensor {
            inner: Rc::new(RefCell::new(Inner {
                shape,
                data,
                requires_grad,
                grad: None,
                parents,
                backward: Some(backward),
                op,
                backward_done: false,
            })),
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    /// Borrow the forward values.
    pub fn data(&self) -> Ref<'_, [f64]> {
        Ref::map(self.inner.borrow(), |i| i.data.as_slice())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let inner = self.inner.borrow();
        assert_eq!(inner.data.len(), 1, "item: tensor has {} elements", inner.data.len());
        inner.data[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn clear_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Overwrite the values of a leaf (used by optimizers and finite
    /// differences). Must not be called on a tensor that already feeds a
    /// live graph.
    pub fn set_data(&self, data: &[f64]) {
        let mut inner = self.inner.borrow_mut();
        assert_eq!(inner.data.len(), data.len(), "set_data: length mismatch");
        inner.data.copy_from_slice(data);
    }

    /// In-place update with simultaneous access to value and gradient.
    /// The closure is skipped when no gradient is present.
    pub fn apply_step(&self, f: impl FnOnce(&mut [f64], &[f64])) {
        let mut inner = self.inner.borrow_mut();
        let Inner { data, grad, .. } = &mut *inner;
        if let Some(g) = grad {
            f(data.as_mut_slice(), g.as_slice());
        }
    }

    fn accumulate(&self, delta: &[f64]) {
        let mut inner = self.inner.borrow_mut();
        if !inner.requires_grad {
            return;
        }
        let len = inner.data.len();
        debug_assert_eq!(delta.len(), len);
        let grad = inner.grad.get_or_insert_with(|| vec![0.0; len]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    // -- graph execution -----------------------------------------------

    /// Reverse-mode sweep from a scalar loss. Populates `grad` on every
    /// `requires_grad` tensor reachable from `self`, visiting each node
    /// exactly once.
    pub fn backward(&self) {
        {
            let mut inner = self.inner.borrow_mut();
            assert_eq!(
                inner.data.len(),
                1,
                "backward: loss must be scalar, got shape {:?}",
                inner.shape
            );
            assert!(
                !inner.backward_done,
                "backward: called twice on the same graph; rebuild the graph (and clear grads)"
            );
            inner.backward_done = true;
        }

        // Post-order DFS: parents land before consumers, so the reversed
        // list processes every consumer before the node it feeds.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<usize> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            let key = Rc::as_ptr(&t.inner) as usize;
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(key) {
                continue;
            }
            stack.push((t.clone(), true));
            let inner = t.inner.borrow();
            for p in inner.parents.iter() {
                if p.requires_grad() {
                    stack.push((p.clone(), false));
                }
            }
        }

        self.accumulate(&[1.0]);
        for t in order.iter().rev() {
            let (grad, parents, has_backward) = {
                let inner = t.inner.borrow();
                (inner.grad.clone(), inner.parents.clone(), inner.backward.is_some())
            };
            if !has_backward {
                continue;
            }
            let Some(grad) = grad else { continue };
            let inner = t.inner.borrow();
            (inner.backward.as_ref().unwrap())(&grad, &parents);
        }
    }

    // -- elementwise ops -------------------------------------------------

    fn check_same_shape(&self, other: &Tensor, op: &'static str) {
        let a = self.inner.borrow();
        let b = other.inner.borrow();
        assert_eq!(
            a.shape, b.shape,
            "{op}: shape mismatch {:?} vs {:?}",
            a.shape, b.shape
        );
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.check_same_shape(other, "add");
        let data: Vec<f64> = {
            let a = self.data();
            let b = other.data();
            a.iter().zip(b.iter()).map(|(x, y)| x + y).collect()
        };
        Tensor::node(
            self.shape(),
            data,
            vec![self.clone(), other.clone()],
            "add",
            Box::new(|g, parents| {
                parents[0].accumulate(g);
                parents[1].accumulate(g);
            }),
        )
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.check_same_shape(other, "sub");
        let data: Vec<f64> = {
            let a = self.data();
            let b = other.data();
            a.iter().zip(b.iter()).map(|(x, y)| x - y).collect()
        };
        Tensor::node(
            self.shape(),
            data,
            vec![self.clone(), other.clone()],
            "sub",
            Box::new(|g, parents| {
                parents[0].accumulate(g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                parents[1].accumulate(&neg);
            }),
        )
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.check_same_shape(other, "mul");
        let data: Vec<f64> = {
            let a = self.data();
            let b = other.data();
            a.iter().zip(b.iter()).map(|(x, y)| x * y).collect()
        };
        Tensor::node(
            self.shape(),
            data,
            vec![self.clone(), other.clone()],
            "mul",
            Box::new(|g, parents| {
                let da: Vec<f64> = {
                    let b = parents[1].data();
                    g.iter().zip(b.iter()).map(|(gv, bv)| gv * bv).collect()
                };
                let db: Vec<f64> = {
                    let a = parents[0].data();
                    g.iter().zip(a.iter()).map(|(gv, av)| gv * av).collect()
                };
                parents[0].accumulate(&da);
                parents[1].accumulate(&db);
            }),
        )
    }

    /// Scalar multiple.
    pub fn scale(&self, c: f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|v| c * v).collect();
        Tensor::node(
            self.shape(),
            data,
            vec![self.clone()],
            "scale",
            Box::new(move |g, parents| {
                let d: Vec<f64> = g.iter().map(|v| c * v).collect();
                parents[0].accumulate(&d);
            }),
        )
    }

    pub fn relu(&self) -> Tensor {
        self.leaky_relu_tagged(0.0, "relu")
    }

    pub fn leaky_relu(&self, alpha: f64) -> Tensor {
        self.leaky_relu_tagged(alpha, "leaky_relu")
    }

    fn leaky_relu_tagged(&self, alpha: f64, op: &'static str) -> Tensor {
        let input = self.to_vec();
        let data: Vec<f64> = input.iter().map(|&v| if v > 0.0 { v } else { alpha * v }).collect();
        Tensor::node(
            self.shape(),
            data,
            vec![self.clone()],
            op,
            Box::new(move |g, parents| {
                let d: Vec<f64> = g
                    .iter()
                    .zip(input.iter())
                    .map(|(gv, &x)| if x > 0.0 { *gv } else { alpha * gv })
                    .collect();
                parents[0].accumulate(&d);
            }),
        )
    }

    pub fn tanh(&self) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|v| v.tanh()).collect();
        let out = data.clone();
        Tensor::node(
            self.shape(),
            data,
            vec![self.clone()],
            "tanh",
            Box::new(move |g, parents| {
                let d: Vec<f64> = g
                    .iter()
                    .zip(out.iter())
                    .map(|(gv, y)| gv * (1.0 - y * y))
                    .collect();
                parents[0].accumulate(&d);
            }),
        )
    }

    // -- reductions -------------------------------------------------------

    pub fn sum(&self) -> Tensor {
        let total: f64 = self.data().iter().sum();
        let n = self.len();
        Tensor::node(
            vec![1],
            vec![total],
            vec![self.clone()],
            "sum",
            Box::new(move |g, parents| {
                let d = vec![g[0]; n];
                parents[0].accumulate(&d);
            }),
        )
    }

    /// Inner product of two same-shape tensors (flattened).
    pub fn dot(&self, other: &Tensor) -> Tensor {
        self.check_same_shape(other, "dot");
        let total: f64 = {
            let a = self.data();
            let b = other.data();
            a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
        };
        Tensor::node(
            vec![1],
            vec![total],
            vec![self.clone(), other.clone()],
            "dot",
            Box::new(|g, parents| {
                let g0 = g[0];
                let da: Vec<f64> = parents[1].data().iter().map(|v| g0 * v).collect();
                let db: Vec<f64> = parents[0].data().iter().map(|v| g0 * v).collect();
                parents[0].accumulate(&da);
                parents[1].accumulate(&db);
            }),
        )
    }

    // -- shape ops ---------------------------------------------------------

    pub fn reshape(&self, new_shape: &[usize]) -> Tensor {
        let old = self.shape();
        assert_eq!(
            product(&old),
            product(new_shape),
            "reshape: cannot reshape {:?} into {:?}",
            old,
            new_shape
        );
        Tensor::node(
            new_shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            "reshape",
            Box::new(|g, parents| parents[0].accumulate(g)),
        )
    }

    // -- linear algebra ------------------------------------------------------

    /// 2-D matrix product: (m,k) x (k,n) -> (m,n), row-major.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let sa = self.shape();
        let sb = other.shape();
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul: shape mismatch {:?} vs {:?}",
            sa,
            sb
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        {
            let a = self.data();
            let b = other.data();
            for i in 0..m {
                for l in 0..k {
                    let av = a[i * k + l];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &b[l * n..(l + 1) * n];
                    let drow = &mut data[i * n..(i + 1) * n];
                    for j in 0..n {
                        drow[j] += av * brow[j];
                    }
                }
            }
        }
        Tensor::node(
            vec![m, n],
            data,
            vec![self.clone(), other.clone()],
            "matmul",
            Box::new(move |g, parents| {
                // gA = g Bᵀ ; gB = Aᵀ g
                let da: Vec<f64> = {
                    let b = parents[1].data();
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for l in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i * n + j] * b[l * n + j];
                            }
                            da[i * k + l] = acc;
                        }
                    }
                    da
                };
                let db: Vec<f64> = {
                    let a = parents[0].data();
                    let mut db = vec![0.0; k * n];
                    for l in 0..k {
                        for i in 0..m {
                            let av = a[i * k + l];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[l * n + j] += av * g[i * n + j];
                            }
                        }
                    }
                    db
                };
                parents[0].accumulate(&da);
                parents[1].accumulate(&db);
            }),
        )
    }

    /// Matrix-vector product: (m,k) x (k,) -> (m,).
    pub fn matvec(&self, x: &Tensor) -> Tensor {
        let sa = self.shape();
        let sx = x.shape();
        assert!(
            sa.len() == 2 && sx.len() == 1 && sa[1] == sx[0],
            "matvec: shape mismatch {:?} vs {:?}",
            sa,
            sx
        );
        let (m, k) = (sa[0], sa[1]);
        let mut data = vec![0.0; m];
        {
            let a = self.data();
            let xv = x.data();
            for i in 0..m {
                let row = &a[i * k..(i + 1) * k];
                let mut acc = 0.0;
                for l in 0..k {
                    acc += row[l] * xv[l];
                }
                data[i] = acc;
            }
        }
        Tensor::node(
            vec![m],
            data,
            vec![self.clone(), x.clone()],
            "matvec",
            Box::new(move |g, parents| {
                let da: Vec<f64> = {
                    let xv = parents[1].data();
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let gi = g[i];
                        if gi == 0.0 {
                            continue;
                        }
                        for l in 0..k {
                            da[i * k + l] = gi * xv[l];
                        }
                    }
                    da
                };
                let dx: Vec<f64> = {
                    let a = parents[0].data();
                    let mut dx = vec![0.0; k];
                    for i in 0..m {
                        let gi = g[i];
                        if gi == 0.0 {
                            continue;
                        }
                        let row = &a[i * k..(i + 1) * k];
                        for l in 0..k {
                            dx[l] += gi * row[l];
                        }
                    }
                    dx
                };
                parents[0].accumulate(&da);
                parents[1].accumulate(&dx);
            }),
        )
    }

    /// Batchless affine map `W x + b` with `W (out,in)`, `x (in)`, `b (out)`.
    pub fn linear(w: &Tensor, x: &Tensor, b: &Tensor) -> Tensor {
        w.matvec(x).add(b)
    }

    // -- 3-D volume ops -----------------------------------------------------

    fn expect_4d(&self, op: &'static str) -> (usize, usize, usize, usize) {
        let s = self.shape();
        assert_eq!(s.len(), 4, "{op}: expected (C,X,Y,Z) tensor, got {s:?}");
        (s[0], s[1], s[2], s[3])
    }

    /// Nearest-neighbour x2 upsampling of a (C,X,Y,Z) volume.
    pub fn upsample3d_nearest(&self) -> Tensor {
        let (c, nx, ny, nz) = self.expect_4d("upsample3d_nearest");
        let (ox, oy, oz) = (2 * nx, 2 * ny, 2 * nz);
        let mut data = vec![0.0; c * ox * oy * oz];
        {
            let src = self.data();
            for ch in 0..c {
                for x in 0..ox {
                    for y in 0..oy {
                        let base_in = ((ch * nx + x / 2) * ny + y / 2) * nz;
                        let base_out = ((ch * ox + x) * oy + y) * oz;
                        for z in 0..oz {
                            data[base_out + z] = src[base_in + z / 2];
                        }
                    }
                }
            }
        }
        Tensor::node(
            vec![c, ox, oy, oz],
            data,
            vec![self.clone()],
            "upsample3d_nearest",
            Box::new(move |g, parents| {
                let mut d = vec![0.0; c * nx * ny * nz];
                for ch in 0..c {
                    for x in 0..ox {
                        for y in 0..oy {
                            let base_in = ((ch * nx + x / 2) * ny + y / 2) * nz;
                            let base_out = ((ch * ox + x) * oy + y) * oz;
                            for z in 0..oz {
                                d[base_in + z / 2] += g[base_out + z];
                            }
                        }
                    }
                }
                parents[0].accumulate(&d);
            }),
        )
    }

    /// Corner crop of a (C,X,Y,Z) volume down to (C,ox,oy,oz).
    pub fn crop3d(&self, ox: usize, oy: usize, oz: usize) -> Tensor {
        let (c, nx, ny, nz) = self.expect_4d("crop3d");
        assert!(
            ox <= nx && oy <= ny && oz <= nz,
            "crop3d: target ({ox},{oy},{oz}) exceeds volume ({nx},{ny},{nz})"
        );
        let mut data = vec![0.0; c * ox * oy * oz];
        {
            let src = self.data();
            for ch in 0..c {
                for x in 0..ox {
                    for y in 0..oy {
                        let src_base = ((ch * nx + x) * ny + y) * nz;
                        let dst_base = ((ch * ox + x) * oy + y) * oz;
                        data[dst_base..dst_base + oz]
                            .copy_from_slice(&src[src_base..src_base + oz]);
                    }
                }
            }
        }
        Tensor::node(
            vec![c, ox, oy, oz],
            data,
            vec![self.clone()],
            "crop3d",
            Box::new(move |g, parents| {
                let mut d = vec![0.0; c * nx * ny * nz];
                for ch in 0..c {
                    for x in 0..ox {
                        for y in 0..oy {
                            let src_base = ((ch * ox + x) * oy + y) * oz;
                            let dst_base = ((ch * nx + x) * ny + y) * nz;
                            d[dst_base..dst_base + oz]
                                .copy_from_slice(&g[src_base..src_base + oz]);
                        }
                    }
                }
                parents[0].accumulate(&d);
            }),
        )
    }

    /// Gather lattice sites from a (C,X,Y,Z) volume into a flat vector of
    /// length `C * indices.len()`, interleaved by site: the output entry
    /// `C*k + c` is channel `c` at `indices[k]`.
    pub fn mask_gather(&self, indices: &[(usize, usize, usize)]) -> Tensor {
        let (c, nx, ny, nz) = self.expect_4d("mask_gather");
        for &(ix, iy, iz) in indices {
            assert!(
                ix < nx && iy < ny && iz < nz,
                "mask_gather: index ({ix},{iy},{iz}) outside volume ({nx},{ny},{nz})"
            );
        }
        let idx: Rc<Vec<(usize, usize, usize)>> = Rc::new(indices.to_vec());
        let n = idx.len();
        let mut data = vec![0.0; c * n];
        {
            let src = self.data();
            for (k, &(ix, iy, iz)) in idx.iter().enumerate() {
                for ch in 0..c {
                    data[c * k + ch] = src[((ch * nx + ix) * ny + iy) * nz + iz];
                }
            }
        }
        let idx_b = Rc::clone(&idx);
        Tensor::node(
            vec![c * n],
            data,
            vec![self.clone()],
            "mask_gather",
            Box::new(move |g, parents| {
                let mut d = vec![0.0; c * nx * ny * nz];
                for (k, &(ix, iy, iz)) in idx_b.iter().enumerate() {
                    for ch in 0..c {
                        d[((ch * nx + ix) * ny + iy) * nz + iz] += g[c * k + ch];
                    }
                }
                parents[0].accumulate(&d);
            }),
        )
    }

    /// 3-D convolution, stride 1, odd kernel, zero padding, same output
    /// size. `self` is (Cin,X,Y,Z), `kernel` is (Cout,Cin,K,K,K), `bias`
    /// is (Cout,).
    pub fn conv3d(&self, kernel: &Tensor, bias: &Tensor) -> Tensor {
        let (cin, nx, ny, nz) = self.expect_4d("conv3d");
        let ks = kernel.shape();
        assert!(
            ks.len() == 5 && ks[1] == cin && ks[2] == ks[3] && ks[3] == ks[4] && ks[2] % 2 == 1,
            "conv3d: kernel shape {ks:?} incompatible with input ({cin},{nx},{ny},{nz})"
        );
        let (cout, k) = (ks[0], ks[2]);
        let bs = bias.shape();
        assert!(
            bs.len() == 1 && bs[0] == cout,
            "conv3d: bias shape {bs:?}, expected [{cout}]"
        );

        let data = {
            let inp = self.data();
            let ker = kernel.data();
            let b = bias.data();
            conv3d_forward(&inp, &ker, &b, cin, cout, nx, ny, nz, k)
        };
        Tensor::node(
            vec![cout, nx, ny, nz],
            data,
            vec![self.clone(), kernel.clone(), bias.clone()],
            "conv3d",
            Box::new(move |g, parents| {
                let (din, dker, dbias) = {
                    let inp = parents[0].data();
                    let ker = parents[1].data();
                    conv3d_backward(g, &inp, &ker, cin, cout, nx, ny, nz, k)
                };
                parents[0].accumulate(&din);
                parents[1].accumulate(&dker);
                parents[2].accumulate(&dbias);
            }),
        )
    }
}

/// Valid ranges so that `pos + d` stays inside `[0, n)`.
#[inline]
fn shift_range(n: usize, d: isize) -> (usize, usize) {
    let lo = if d < 0 { (-d) as usize } else { 0 };
    let hi = if d > 0 { n - d as usize } else { n };
    (lo, hi)
}

fn conv3d_forward(
    inp: &[f64],
    ker: &[f64],
    bias: &[f64],
    cin: usize,
    cout: usize,
    nx: usize,
    ny: usize,
    nz: usize,
    k: usize,
) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let vol = nx * ny * nz;
    let mut out = vec![0.0; cout * vol];
    for co in 0..cout {
        out[co * vol..(co + 1) * vol].fill(bias[co]);
    }
    for co in 0..cout {
        for ci in 0..cin {
            for kx in 0..k {
                let dx = kx as isize - pad;
                let (x0, x1) = shift_range(nx, dx);
                for ky in 0..k {
                    let dy = ky as isize - pad;
                    let (y0, y1) = shift_range(ny, dy);
                    for kz in 0..k {
                        let dz = kz as isize - pad;
                        let (z0, z1) = shift_range(nz, dz);
                        if z0 >= z1 {
                            continue;
                        }
                        let w = ker[(((co * cin + ci) * k + kx) * k + ky) * k + kz];
                        if w == 0.0 {
                            continue;
                        }
                        for x in x0..x1 {
                            let sx = (x as isize + dx) as usize;
                            for y in y0..y1 {
                                let sy = (y as isize + dy) as usize;
                                let ob = (co * vol) + (x * ny + y) * nz;
                                let ib = (ci * vol)
                                    + (sx * ny + sy) * nz
                                    + (z0 as isize + dz) as usize;
                                let out_line = &mut out[ob + z0..ob + z1];
                                let in_line = &inp[ib..ib + (z1 - z0)];
                                for (o, i) in out_line.iter_mut().zip(in_line) {
                                    *o += w * i;
                                }
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
fn conv3d_backward(
    gout: &[f64],
    inp: &[f64],
    ker: &[f64],
    cin: usize,
    cout: usize,
    nx: usize,
    ny: usize,
    nz: usize,
    k: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let pad = (k / 2) as isize;
    let vol = nx * ny * nz;
    let mut din = vec![0.0; cin * vol];
    let mut dker = vec![0.0; cout * cin * k * k * k];
    let mut dbias = vec![0.0; cout];

    for co in 0..cout {
        dbias[co] = gout[co * vol..(co + 1) * vol].iter().sum();
    }

    for co in 0..cout {
        for ci in 0..cin {
            for kx in 0..k {
                let dx = kx as isize - pad;
                let (x0, x1) = shift_range(nx, dx);
                for ky in 0..k {
                    let dy = ky as isize - pad;
                    let (y0, y1) = shift_range(ny, dy);
                    for kz in 0..k {
                        let dz = kz as isize - pad;
                        let (z0, z1) = shift_range(nz, dz);
                        if z0 >= z1 {
                            continue;
                        }
                        let w = ker[(((co * cin + ci) * k + kx) * k + ky) * k + kz];
                        let mut wgrad = 0.0;
                        for x in x0..x1 {
                            let sx = (x as isize + dx) as usize;
                            for y in y0..y1 {
                                let sy = (y as isize + dy) as usize;
                                let ob = (co * vol) + (x * ny + y) * nz;
                                let ib = (ci * vol)
                                    + (sx * ny + sy) * nz
                                    + (z0 as isize + dz) as usize;
                                let g_line = &gout[ob + z0..ob + z1];
                                let in_line = &inp[ib..ib + (z1 - z0)];
                                // dL/dw accumulates the correlation; dL/dx
                                // scatters the kernel weight back.
                                let din_line = &mut din[ib..ib + (z1 - z0)];
                                for ((gv, iv), dv) in
                                    g_line.iter().zip(in_line).zip(din_line.iter_mut())
                                {
                                    wgrad += gv * iv;
                                    *dv += w * gv;
                                }
                            }
                        }
                        dker[(((co * cin + ci) * k + kx) * k + ky) * k + kz] = wgrad;
                    }
                }
            }
        }
    }
    (din, dker, dbias)
}

/// Central-difference gradient of `f` at `x`: an implementation-independent
/// oracle for checking analytic gradients.
pub fn central_difference_gradient(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    h: f64,
) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}
