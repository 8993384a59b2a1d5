//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Values are computed eagerly as nodes are appended, so node ids are a
//! topological order by construction; the backward pass walks ids in reverse.
//! The engine is generic over the float type: training runs in `f32`,
//! gradient verification against finite differences runs in `f64`.

mod ops;
mod scalar;

pub use scalar::Scalar;

use ndarray::ArrayD;

/// Handle to a node in a [`Graph`]. Only valid for the graph that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// One operation's contribution to the backward pass: given the gradient of
/// the loss with respect to this node's output, push gradients onto parents.
trait Backward<F: Scalar> {
    fn backward(
        &self,
        values: &[ArrayD<F>],
        out: usize,
        parents: &[Var],
        grad_out: &ArrayD<F>,
        sink: &mut GradSink<'_, F>,
    );
}

/// Accumulates parent gradients during the backward sweep. Destinations the
/// loss does not depend on are silently dropped, and ops can ask first via
/// [`GradSink::wanted`] to skip computing them at all.
struct GradSink<'a, F: Scalar> {
    slots: &'a mut [Option<ArrayD<F>>],
    needs_grad: &'a [bool],
}

impl<F: Scalar> GradSink<'_, F> {
    fn wanted(&self, v: Var) -> bool {
        self.needs_grad[v.0]
    }

    fn add(&mut self, v: Var, grad: ArrayD<F>) {
        if !self.needs_grad[v.0] {
            return;
        }
        match &mut self.slots[v.0] {
            Some(acc) => *acc += &grad,
            slot @ None => *slot = Some(grad),
        }
    }
}

/// Gradients of one scalar root with respect to graph nodes, keyed by [`Var`].
/// Only leaves (and nodes explicitly retained) are present after a sweep.
pub struct Gradients<F: Scalar> {
    slots: Vec<Option<ArrayD<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient for `v`, if the root depends on it.
    pub fn get(&self, v: Var) -> Option<&ArrayD<F>> {
        self.slots.get(v.0).and_then(|s| s.as_ref())
    }

    /// Removes and returns the gradient for `v`.
    pub fn take(&mut self, v: Var) -> Option<ArrayD<F>> {
        self.slots.get_mut(v.0).and_then(|s| s.take())
    }
}

/// Append-only computation tape.
pub struct Graph<F: Scalar> {
    values: Vec<ArrayD<F>>,
    ops: Vec<Option<Box<dyn Backward<F>>>>,
    parents: Vec<Vec<Var>>,
    needs_grad: Vec<bool>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph {
            values: Vec::new(),
            ops: Vec::new(),
            parents: Vec::new(),
            needs_grad: Vec::new(),
        }
    }

    /// Leaf that is treated as fixed data: no gradient is accumulated for it.
    pub fn constant(&mut self, value: ArrayD<F>) -> Var {
        self.push_leaf(value, false)
    }

    /// Leaf that participates in differentiation (a parameter or an input
    /// whose sensitivity is being measured).
    pub fn leaf(&mut self, value: ArrayD<F>) -> Var {
        self.push_leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &ArrayD<F> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    /// Value of a zero-dimensional (scalar) node.
    pub fn scalar_value(&self, v: Var) -> F {
        debug_assert!(self.values[v.0].len() == 1);
        *self.values[v.0].iter().next().expect("scalar node")
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push_leaf(&mut self, value: ArrayD<F>, needs_grad: bool) -> Var {
        self.values.push(value);
        self.ops.push(None);
        self.parents.push(Vec::new());
        self.needs_grad.push(needs_grad);
        Var(self.values.len() - 1)
    }

    fn push_op(&mut self, value: ArrayD<F>, op: Box<dyn Backward<F>>, parents: Vec<Var>) -> Var {
        let needs = parents.iter().any(|p| self.needs_grad[p.0]);
        self.values.push(value);
        // Ops whose every parent is constant never receive a gradient; the
        // boxed op is kept anyway for simplicity, it just won't be visited.
        self.ops.push(Some(op));
        self.parents.push(parents);
        self.needs_grad.push(needs);
        Var(self.values.len() - 1)
    }

    /// Reverse sweep from a scalar `root`. Returns gradients for every leaf
    /// registered with [`Graph::leaf`] that the root depends on.
    pub fn backward(&self, root: Var) -> Gradients<F> {
        assert!(
            self.values[root.0].len() == 1,
            "backward root must be scalar, got shape {:?}",
            self.values[root.0].shape()
        );
        let mut slots: Vec<Option<ArrayD<F>>> = vec![None; self.values.len()];
        slots[root.0] = Some(ArrayD::from_elem(self.values[root.0].raw_dim(), F::ONE));
        for id in (0..=root.0).rev() {
            if !self.needs_grad[id] {
                continue;
            }
            let Some(op) = self.ops[id].as_ref() else {
                continue; // leaf: gradient stays in its slot
            };
            let Some(grad_out) = slots[id].take() else {
                continue; // root does not depend on this node
            };
            // Parents always have smaller ids, so splitting at `id` lets the
            // op borrow its own gradient while the sink mutates earlier slots.
            let (done, _) = slots.split_at_mut(id);
            let mut sink = GradSink {
                slots: done,
                needs_grad: &self.needs_grad,
            };
            op.backward(&self.values, id, &self.parents[id], &grad_out, &mut sink);
        }
        Gradients { slots }
    }
}

/// Reshapes an owned dynamic array, copying only if the layout requires it.
fn reshape_arr<F: Scalar>(arr: ArrayD<F>, shape: &[usize]) -> ArrayD<F> {
    let len: usize = shape.iter().product();
    assert_eq!(arr.len(), len, "reshape {:?} -> {:?}", arr.shape(), shape);
    let vec = if arr.is_standard_layout() {
        arr.into_raw_vec_and_offset().0
    } else {
        arr.iter().copied().collect()
    };
    ArrayD::from_shape_vec(ndarray::IxDyn(shape), vec).expect("validated reshape")
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;

    /// Central finite difference of `f` at `xs`, one derivative per entry of
    /// each input array.
    pub fn numeric_grad(
        xs: &[ArrayD<f64>],
        step: f64,
        f: impl Fn(&[ArrayD<f64>]) -> f64,
    ) -> Vec<ArrayD<f64>> {
        let mut out = Vec::with_capacity(xs.len());
        let mut work: Vec<ArrayD<f64>> = xs.to_vec();
        for i in 0..xs.len() {
            let mut g = ArrayD::zeros(xs[i].raw_dim());
            for idx in 0..xs[i].len() {
                let orig = work[i].as_slice_mut().unwrap()[idx];
                work[i].as_slice_mut().unwrap()[idx] = orig + step;
                let hi = f(&work);
                work[i].as_slice_mut().unwrap()[idx] = orig - step;
                let lo = f(&work);
                work[i].as_slice_mut().unwrap()[idx] = orig;
                g.as_slice_mut().unwrap()[idx] = (hi - lo) / (2.0 * step);
            }
            out.push(g);
        }
        out
    }

    /// Scale-free gradient disagreement: L2 distance over the larger norm.
    pub fn rel_err(analytic: &[ArrayD<f64>], numeric: &[ArrayD<f64>]) -> f64 {
        let mut diff = 0.0;
        let mut na = 0.0;
        let mut nn = 0.0;
        for (a, n) in analytic.iter().zip(numeric) {
            for (&x, &y) in a.iter().zip(n.iter()) {
                diff += (x - y) * (x - y);
                na += x * x;
                nn += y * y;
            }
        }
        diff.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-12)
    }
}

#[cfg(test)]
mod tests {
    use super::testutil::{numeric_grad, rel_err};
    use super::*;
    use ndarray::IxDyn;

    fn arr(shape: &[usize], vals: &[f64]) -> ArrayD<f64> {
        ArrayD::from_shape_vec(IxDyn(shape), vals.to_vec()).unwrap()
    }

    #[test]
    fn constant_leaves_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(arr(&[2], &[1.0, 2.0]));
        let b = g.constant(arr(&[2], &[3.0, 4.0]));
        let c = g.mul(a, b);
        let s = g.sum_all(c);
        let grads = g.backward(s);
        assert_eq!(grads.get(a).unwrap(), &arr(&[2], &[3.0, 4.0]));
        assert!(grads.get(b).is_none());
    }

    #[test]
    fn gradient_accumulates_across_reuse() {
        // s = sum(a * a + a): ds/da = 2a + 1.
        let mut g = Graph::<f64>::new();
        let a = g.leaf(arr(&[3], &[0.5, -1.0, 2.0]));
        let sq = g.mul(a, a);
        let sum = g.add(sq, a);
        let s = g.sum_all(sum);
        let grads = g.backward(s);
        assert_eq!(grads.get(a).unwrap(), &arr(&[3], &[2.0, -1.0, 5.0]));
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(arr(&[2], &[1.0, 2.0]));
        let b = g.add(a, a);
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| g.backward(b)));
        assert!(result.is_err());
    }

    #[test]
    fn unreachable_nodes_are_skipped() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(arr(&[2], &[1.0, 2.0]));
        let _orphan = g.mul(a, a);
        let s = g.sum_all(a);
        let grads = g.backward(s);
        assert_eq!(grads.get(a).unwrap(), &arr(&[2], &[1.0, 1.0]));
    }

    // Finite-difference checks for each op follow. All run in f64 with the
    // same tolerances so a sign or transpose slip in any backward rule fails
    // loudly here rather than deep inside training.

    fn check(
        inputs: &[ArrayD<f64>],
        tol: f64,
        build: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
    ) {
        let f = |xs: &[ArrayD<f64>]| -> f64 {
            let mut g = Graph::<f64>::new();
            let vars: Vec<Var> = xs.iter().map(|x| g.leaf(x.clone())).collect();
            let out = build(&mut g, &vars);
            g.scalar_value(out)
        };
        let numeric = numeric_grad(inputs, 1e-5, f);

        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone())).collect();
        let out = build(&mut g, &vars);
        let grads = g.backward(out);
        let analytic: Vec<ArrayD<f64>> = vars
            .iter()
            .map(|&v| {
                grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| ArrayD::zeros(g.value(v).raw_dim()))
            })
            .collect();
        let err = rel_err(&analytic, &numeric);
        assert!(err < tol, "gradient mismatch: rel err {err:.3e} >= {tol:.1e}");
    }

    fn seq(shape: &[usize], scale: f64, offset: f64) -> ArrayD<f64> {
        let n: usize = shape.iter().product();
        let vals: Vec<f64> = (0..n)
            .map(|i| ((i * 37 + 11) % 19) as f64 / 19.0 * scale + offset)
            .collect();
        arr(shape, &vals)
    }

    #[test]
    fn fd_elementwise_ops() {
        let a = seq(&[2, 3], 2.0, -1.0);
        let b = seq(&[2, 3], 1.5, 0.2);
        check(&[a.clone(), b.clone()], 1e-7, |g, v| {
            let x = g.add(v[0], v[1]);
            g.sum_all(x)
        });
        check(&[a.clone(), b.clone()], 1e-7, |g, v| {
            let x = g.sub(v[0], v[1]);
            let y = g.mul(x, v[1]);
            g.sum_all(y)
        });
        check(&[a.clone()], 1e-7, |g, v| {
            let x = g.scale(v[0], -0.7);
            let y = g.sqr(x);
            g.mean_all(y)
        });
    }

    #[test]
    fn fd_activations() {
        let a = seq(&[3, 4], 3.0, -1.5);
        for f in [
            Graph::<f64>::gelu as fn(&mut Graph<f64>, Var) -> Var,
            Graph::<f64>::sigmoid,
            Graph::<f64>::tanh_act,
        ] {
            check(&[a.clone()], 1e-6, |g, v| {
                let x = f(g, v[0]);
                let y = g.sqr(x);
                g.sum_all(y)
            });
        }
        // Leaky ReLU is non-smooth at zero; keep probe values away from it.
        let off = seq(&[3, 4], 3.0, -1.55);
        check(&[off], 1e-6, |g, v| {
            let x = g.leaky_relu(v[0], 0.1);
            let y = g.sqr(x);
            g.sum_all(y)
        });
    }

    #[test]
    fn fd_matmul_variants() {
        let a = seq(&[3, 4], 1.0, -0.4);
        let b = seq(&[4, 2], 1.0, 0.1);
        check(&[a.clone(), b.clone()], 1e-7, |g, v| {
            let c = g.matmul(v[0], v[1]);
            let c = g.sqr(c);
            g.sum_all(c)
        });
        let at = seq(&[4, 3], 1.0, -0.2);
        check(&[at, b.clone()], 1e-7, |g, v| {
            let c = g.matmul_tn(v[0], v[1]);
            let c = g.sqr(c);
            g.sum_all(c)
        });
        let bt = seq(&[2, 4], 1.0, 0.3);
        check(&[a, bt], 1e-7, |g, v| {
            let c = g.matmul_nt(v[0], v[1]);
            let c = g.sqr(c);
            g.sum_all(c)
        });
    }

    #[test]
    fn fd_bias_and_reshape() {
        let x = seq(&[3, 5], 1.0, -0.5);
        let b = seq(&[3], 0.5, 0.1);
        check(&[x.clone(), b], 1e-7, |g, v| {
            let y = g.add_bias_rows(v[0], v[1]);
            let y = g.sqr(y);
            g.sum_all(y)
        });
        check(&[x], 1e-7, |g, v| {
            let y = g.reshape(v[0], &[5, 3]);
            let z = g.sqr(y);
            g.mean_all(z)
        });
    }

    #[test]
    fn fd_softmax_rows() {
        let x = seq(&[3, 4], 4.0, -2.0);
        check(&[x], 1e-6, |g, v| {
            let y = g.softmax_rows(v[0]);
            let w = g.sqr(y);
            g.sum_all(w)
        });
    }

    #[test]
    fn fd_softmax_channels() {
        let x = seq(&[3, 2, 2], 3.0, -1.0);
        check(&[x], 1e-6, |g, v| {
            let y = g.softmax_channels(v[0]);
            let z = g.sqr(y);
            g.sum_all(z)
        });
    }

    #[test]
    fn fd_layer_norm() {
        let x = seq(&[4, 2, 3], 2.0, -0.8);
        let gain = seq(&[4], 0.5, 0.75);
        let bias = seq(&[4], 0.4, -0.2);
        check(&[x, gain, bias], 1e-6, |g, v| {
            let y = g.layer_norm_channels(v[0], v[1], v[2]);
            let z = g.sqr(y);
            g.sum_all(z)
        });
    }

    #[test]
    fn fd_conv2d() {
        let x = seq(&[2, 5, 4], 1.0, -0.5);
        let w = seq(&[3, 2, 3, 3], 0.8, -0.4);
        let b = seq(&[3], 0.3, 0.0);
        for (stride, pad) in [(1, 1), (2, 1)] {
            check(&[x.clone(), w.clone(), b.clone()], 1e-6, |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad);
                let z = g.sqr(y);
                g.sum_all(z)
            });
        }
    }

    #[test]
    fn fd_pool_and_upsample() {
        let x = seq(&[3, 4, 6], 1.0, -0.3);
        check(&[x.clone()], 1e-7, |g, v| {
            let y = g.avg_pool2(v[0]);
            let z = g.sqr(y);
            g.sum_all(z)
        });
        check(&[x.clone()], 1e-7, |g, v| {
            let y = g.upsample_nearest2(v[0]);
            let z = g.sqr(y);
            g.sum_all(z)
        });
        check(&[x], 1e-6, |g, v| {
            let y = g.resize_bilinear(v[0], 8, 12);
            let z = g.sqr(y);
            g.sum_all(z)
        });
    }

    #[test]
    fn fd_concat_and_broadcast_mul() {
        let a = seq(&[2, 3, 3], 1.0, 0.0);
        let b = seq(&[4, 3, 3], 1.0, -0.5);
        check(&[a.clone(), b], 1e-7, |g, v| {
            let y = g.concat_channels(v[0], v[1]);
            let z = g.sqr(y);
            g.sum_all(z)
        });
        let m = seq(&[1, 3, 3], 0.9, 0.05);
        check(&[a, m], 1e-7, |g, v| {
            let y = g.mul_bcast_channel(v[0], v[1]);
            let z = g.sqr(y);
            g.sum_all(z)
        });
    }

    #[test]
    fn fd_vector_ops() {
        let a = seq(&[6], 2.0, -1.0);
        let b = seq(&[6], 1.0, 0.5);
        check(&[a.clone(), b.clone()], 1e-6, |g, v| {
            let na = g.l2_normalize(v[0]);
            let nb = g.l2_normalize(v[1]);
            g.dot_vec(na, nb)
        });
        check(&[a], 1e-7, |g, v| {
            let s = g.mean_all(v[0]);
            g.sqr(s)
        });
    }

    #[test]
    fn fd_pad_and_slice() {
        let x = seq(&[3, 4, 5], 1.0, -0.3);
        check(&[x.clone()], 1e-7, |g, v| {
            let y = g.pad_replicate1(v[0]);
            let z = g.sqr(y);
            g.sum_all(z)
        });
        check(&[x], 1e-7, |g, v| {
            let y = g.slice_channels(v[0], 1, 3);
            let z = g.sqr(y);
            g.sum_all(z)
        });
    }

    #[test]
    fn fd_spatial_diffs() {
        let x = seq(&[2, 4, 5], 1.0, -0.2);
        check(&[x.clone()], 1e-7, |g, v| {
            let y = g.fwd_diff_x(v[0]);
            let z = g.sqr(y);
            g.sum_all(z)
        });
        check(&[x], 1e-7, |g, v| {
            let y = g.fwd_diff_y(v[0]);
            let z = g.sqr(y);
            g.sum_all(z)
        });
    }

    #[test]
    fn fd_pow_and_log() {
        // Keep bases comfortably positive: the power op clamps near zero.
        let x = seq(&[1, 3, 3], 0.7, 0.2);
        let p = seq(&[1, 3, 3], 0.5, 0.3);
        check(&[x.clone(), p], 1e-6, |g, v| {
            let y = g.pow_elem(v[0], v[1]);
            let z = g.sqr(y);
            g.sum_all(z)
        });
        check(&[x], 1e-6, |g, v| {
            let y = g.ln_floored(v[0], 1e-8);
            let z = g.sqr(y);
            g.sum_all(z)
        });
    }

    #[test]
    fn pow_elem_handles_zero_base() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(arr(&[1, 1, 2], &[0.0, 0.25]));
        let p = g.leaf(arr(&[1, 1, 2], &[0.5, 0.5]));
        let y = g.pow_elem(x, p);
        assert_eq!(g.value(y).as_slice().unwrap()[0], 0.0);
        assert!((g.value(y).as_slice().unwrap()[1] - 0.5).abs() < 1e-12);
        let s = g.sum_all(y);
        let grads = g.backward(s); // must not produce NaN
        assert!(grads.get(x).unwrap().iter().all(|v| v.is_finite()));
        assert!(grads.get(p).unwrap().iter().all(|v| v.is_finite()));
    }
}
