//! Minimal reverse-mode automatic differentiation over `f64` ndarrays.
//!
//! A [`Tape`] records one forward pass as an append-only DAG; node values
//! are owned by the tape and backward closures address parents by index, so
//! backpropagation is a single reverse sweep. Parameters live outside the
//! tape in a [`ParamStore`]; binding the same parameter twice in one pass
//! (shared weights) reuses the leaf node and therefore accumulates its
//! gradient from every use.

mod conv;

use crate::error::{Error, Result};
use ndarray::{Array2, ArrayD, Axis, Ix2, IxDyn};
use std::collections::BTreeMap;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

/// Handle to a parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// A named trainable tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
}

/// Ordered collection of named parameters. Insertion order is the canonical
/// order for initialization, serialization, and optimizer state.
///
/// Each store carries a process-unique identity so one tape can bind
/// parameters from several stores (say, generator and discriminator)
/// without index collisions; clones keep the identity because they stand
/// for the same logical parameters.
#[derive(Debug, Clone)]
pub struct ParamStore {
    uid: u64,
    params: Vec<Param>,
    index: BTreeMap<String, usize>,
}

impl Default for ParamStore {
    fn default() -> Self {
        static NEXT: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(1);
        ParamStore {
            uid: NEXT.fetch_add(1, std::sync::atomic::Ordering::Relaxed),
            params: Vec::new(),
            index: BTreeMap::new(),
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<f64>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name `{name}`"
        );
        let grad = ArrayD::zeros(value.raw_dim());
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, value, grad });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f64> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &ArrayD<f64> {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.params[id.0].grad
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Replace values from another store with identical names/shapes.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.params.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count mismatch: {} vs {}",
                other.params.len(),
                self.params.len()
            )));
        }
        for (dst, src) in self.params.iter_mut().zip(other.params.iter()) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch: `{}` {:?} vs `{}` {:?}",
                    dst.name,
                    dst.value.shape(),
                    src.name,
                    src.value.shape()
                )));
            }
            dst.value.assign(&src.value);
        }
        Ok(())
    }
}

pub(crate) type BackFn =
    Box<dyn FnOnce(&[ArrayD<f64>], &ArrayD<f64>, &mut [Option<ArrayD<f64>>])>;

/// One recorded forward pass.
#[derive(Default)]
pub struct Tape {
    values: Vec<ArrayD<f64>>,
    backs: Vec<Option<BackFn>>,
    bindings: Vec<(u64, usize, usize)>,
    bind_cache: BTreeMap<(u64, usize), usize>,
    grads: Vec<Option<ArrayD<f64>>>,
    inference: bool,
}

pub(crate) fn accumulate(slot: &mut Option<ArrayD<f64>>, g: ArrayD<f64>) {
    match slot {
        Some(a) => *a += &g,
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that skips recording backward closures; forward-only passes
    /// (sampling, evaluation) avoid the bookkeeping.
    pub fn inference() -> Self {
        Tape { inference: true, ..Self::default() }
    }

    pub(crate) fn push(&mut self, value: ArrayD<f64>, back: Option<BackFn>) -> NodeId {
        self.values.push(value);
        self.backs.push(if self.inference { None } else { back });
        NodeId(self.values.len() - 1)
    }

    /// Leaf holding a non-trainable value.
    pub fn constant(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, None)
    }

    /// Constant zeros with the shape of an existing node.
    pub fn zeros_like(&mut self, x: NodeId) -> NodeId {
        let z = ArrayD::zeros(self.values[x.0].raw_dim());
        self.constant(z)
    }

    pub fn constant4(&mut self, value: ndarray::Array4<f64>) -> NodeId {
        self.constant(value.into_dyn())
    }

    pub fn constant2(&mut self, value: Array2<f64>) -> NodeId {
        self.constant(value.into_dyn())
    }

    /// Bind a parameter as a leaf. Repeated binds of the same parameter on
    /// one tape return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&node) = self.bind_cache.get(&(store.uid, id.0)) {
            return NodeId(node);
        }
        let node = self.push(store.value(id).clone(), None);
        self.bind_cache.insert((store.uid, id.0), node.0);
        self.bindings.push((store.uid, id.0, node.0));
        node
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.values[id.0]
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.values[id.0].shape()
    }

    /// Scalar value of a 0-d or single-element node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = &self.values[id.0];
        debug_assert_eq!(v.len(), 1);
        *v.iter().next().expect("scalar node")
    }

    /// Gradient of the last `backward` target w.r.t. `id`, if it received one.
    pub fn grad(&self, id: NodeId) -> Option<&ArrayD<f64>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Reverse sweep from a scalar loss node. Consumes the backward
    /// closures; a tape can run backward once.
    pub fn backward(&mut self, loss: NodeId) {
        assert_eq!(
            self.values[loss.0].len(),
            1,
            "backward target must be scalar"
        );
        let mut grads: Vec<Option<ArrayD<f64>>> = Vec::with_capacity(self.values.len());
        grads.resize_with(self.values.len(), || None);
        grads[loss.0] = Some(ArrayD::from_elem(self.values[loss.0].raw_dim(), 1.0));
        for i in (0..=loss.0).rev() {
            if grads[i].is_none() {
                continue;
            }
            if let Some(back) = self.backs[i].take() {
                let g = grads[i].take().expect("grad present");
                back(&self.values, &g, &mut grads);
                grads[i] = Some(g);
            }
        }
        self.grads = grads;
    }

    /// Add the gradients of every parameter bound from this store into its
    /// accumulators. Call after [`Tape::backward`]; parameters bound from
    /// other stores are left alone.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for &(uid, pid, node) in &self.bindings {
            if uid != store.uid {
                continue;
            }
            if let Some(g) = self.grads[node].as_ref() {
                store.params[pid].grad += g;
            }
        }
    }

    // ---- elementwise and broadcast ops ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let v = &self.values[a.0] + &self.values[b.0];
        self.push(
            v,
            Some(Box::new(move |_vals, g, grads| {
                accumulate(&mut grads[a.0], g.clone());
                accumulate(&mut grads[b.0], g.clone());
            })),
        )
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let v = &self.values[a.0] - &self.values[b.0];
        self.push(
            v,
            Some(Box::new(move |_vals, g, grads| {
                accumulate(&mut grads[a.0], g.clone());
                accumulate(&mut grads[b.0], g.mapv(|x| -x));
            })),
        )
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let v = &self.values[a.0] * &self.values[b.0];
        self.push(
            v,
            Some(Box::new(move |vals, g, grads| {
                accumulate(&mut grads[a.0], g * &vals[b.0]);
                accumulate(&mut grads[b.0], g * &vals[a.0]);
            })),
        )
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "div shape mismatch");
        let v = &self.values[a.0] / &self.values[b.0];
        self.push(
            v,
            Some(Box::new(move |vals, g, grads| {
                let vb = &vals[b.0];
                accumulate(&mut grads[a.0], g / vb);
                let da = g * &vals[a.0];
                accumulate(&mut grads[b.0], -da / (vb * vb));
            })),
        )
    }

    /// `k * x + c` elementwise.
    pub fn affine(&mut self, x: NodeId, k: f64, c: f64) -> NodeId {
        let v = self.values[x.0].mapv(|t| k * t + c);
        self.push(
            v,
            Some(Box::new(move |_vals, g, grads| {
                accumulate(&mut grads[x.0], g.mapv(|t| k * t));
            })),
        )
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let v = self.values[x.0].mapv(|t| t / (1.0 + (-t).exp()));
        self.push(
            v,
            Some(Box::new(move |vals, g, grads| {
                let d = vals[x.0].mapv(|t| {
                    let s = 1.0 / (1.0 + (-t).exp());
                    s * (1.0 + t * (1.0 - s))
                });
                accumulate(&mut grads[x.0], g * &d);
            })),
        )
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.values[x.0].mapv(|t| 1.0 / (1.0 + (-t).exp()));
        let out = self.push(v, None);
        // backward reads the node's own output value
        if !self.inference {
            let back: BackFn = Box::new(move |vals, g, grads| {
                let y = &vals[out.0];
                accumulate(&mut grads[x.0], g * &y.mapv(|s| s * (1.0 - s)));
            });
            self.backs[out.0] = Some(back);
        }
        out
    }

    /// Broadcast-add a `(B, C)` vector over the spatial axes of `(B, C, H, W)`.
    pub fn add_channel_bias(&mut self, x: NodeId, v: NodeId) -> NodeId {
        let xs = self.values[x.0].view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let vs = self.values[v.0].view().into_dimensionality::<Ix2>().unwrap();
        let (bsz, c, _h, _w) = xs.dim();
        assert_eq!(vs.dim(), (bsz, c), "add_channel_bias shape mismatch");
        let mut out = xs.to_owned();
        for b in 0..bsz {
            for ch in 0..c {
                let add = vs[[b, ch]];
                out.index_axis_mut(Axis(0), b)
                    .index_axis_mut(Axis(0), ch)
                    .mapv_inplace(|t| t + add);
            }
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |_vals, g, grads| {
                let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let dv = g4.sum_axis(Axis(3)).sum_axis(Axis(2));
                accumulate(&mut grads[x.0], g.clone());
                accumulate(&mut grads[v.0], dv.into_dyn());
            })),
        )
    }

    /// Scale channels of `(B, C, H, W)` by `(1 + s_c)` with a learned
    /// per-channel vector `s` of length `C`.
    pub fn channel_scale_one_plus(&mut self, x: NodeId, s: NodeId) -> NodeId {
        let xs = self.values[x.0].view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let sv = self.values[s.0].view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let (bsz, c, _h, _w) = xs.dim();
        assert_eq!(sv.len(), c, "channel_scale_one_plus length mismatch");
        let mut out = xs.to_owned();
        for b in 0..bsz {
            for ch in 0..c {
                let k = 1.0 + sv[ch];
                out.index_axis_mut(Axis(0), b)
                    .index_axis_mut(Axis(0), ch)
                    .mapv_inplace(|t| t * k);
            }
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |vals, g, grads| {
                let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let xv = vals[x.0].view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let sv = vals[s.0].view().into_dimensionality::<ndarray::Ix1>().unwrap();
                let (bsz, c, h, w) = xv.dim();
                let mut dx = ndarray::Array4::<f64>::zeros((bsz, c, h, w));
                let mut ds = ndarray::Array1::<f64>::zeros(c);
                for b in 0..bsz {
                    for ch in 0..c {
                        let k = 1.0 + sv[ch];
                        let gbc = g4.index_axis(Axis(0), b);
                        let gbc = gbc.index_axis(Axis(0), ch);
                        let xbc = xv.index_axis(Axis(0), b);
                        let xbc = xbc.index_axis(Axis(0), ch);
                        let mut dxbc = dx.index_axis_mut(Axis(0), b);
                        let mut dxbc = dxbc.index_axis_mut(Axis(0), ch);
                        ndarray::Zip::from(&mut dxbc).and(&gbc).for_each(|d, &gv| *d = gv * k);
                        ds[ch] += gbc.iter().zip(xbc.iter()).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                accumulate(&mut grads[x.0], dx.into_dyn());
                accumulate(&mut grads[s.0], ds.into_dyn());
            })),
        )
    }

    /// Scale every element of batch item `b` by `s[b]`; `s` has length `B`.
    pub fn scale_per_batch(&mut self, x: NodeId, s: NodeId) -> NodeId {
        let bsz = self.shape(x)[0];
        assert_eq!(self.shape(s), [bsz], "scale_per_batch length mismatch");
        let mut out = self.values[x.0].clone();
        {
            let sv = &self.values[s.0];
            for (b, mut lane) in out.axis_iter_mut(Axis(0)).enumerate() {
                let k = sv[[b]];
                lane.mapv_inplace(|t| t * k);
            }
        }
        self.push(
            out,
            Some(Box::new(move |vals, g, grads| {
                let sv = &vals[s.0];
                let xv = &vals[x.0];
                let mut dx = g.clone();
                let mut ds = ndarray::Array1::<f64>::zeros(sv.len());
                for (b, mut lane) in dx.axis_iter_mut(Axis(0)).enumerate() {
                    let k = sv[[b]];
                    lane.mapv_inplace(|t| t * k);
                    ds[b] = g
                        .index_axis(Axis(0), b)
                        .iter()
                        .zip(xv.index_axis(Axis(0), b).iter())
                        .map(|(a, b)| a * b)
                        .sum();
                }
                accumulate(&mut grads[x.0], dx);
                accumulate(&mut grads[s.0], ds.into_dyn());
            })),
        )
    }

    // ---- shape ops ----

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let old_shape: Vec<usize> = self.shape(x).to_vec();
        let v = self.values[x.0]
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.push(
            v,
            Some(Box::new(move |_vals, g, grads| {
                let back = g
                    .clone()
                    .into_shape_with_order(IxDyn(&old_shape))
                    .expect("reshape backward");
                accumulate(&mut grads[x.0], back);
            })),
        )
    }

    pub fn permute(&mut self, x: NodeId, axes: &[usize]) -> NodeId {
        let v = self.values[x.0]
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        let axes_owned: Vec<usize> = axes.to_vec();
        self.push(
            v,
            Some(Box::new(move |_vals, g, grads| {
                let mut inv = vec![0usize; axes_owned.len()];
                for (i, &a) in axes_owned.iter().enumerate() {
                    inv[a] = i;
                }
                let back = g
                    .view()
                    .permuted_axes(IxDyn(&inv))
                    .as_standard_layout()
                    .to_owned();
                accumulate(&mut grads[x.0], back);
            })),
        )
    }

    /// Concatenate `(B, C_i, H, W)` nodes along the channel axis.
    pub fn concat_channels(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| self.values[p.0].view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_channels");
        let parts_owned: Vec<NodeId> = parts.to_vec();
        let widths: Vec<usize> = parts.iter().map(|p| self.shape(*p)[1]).collect();
        self.push(
            v.as_standard_layout().to_owned(),
            Some(Box::new(move |_vals, g, grads| {
                let mut start = 0;
                for (p, w) in parts_owned.iter().zip(widths.iter()) {
                    let sl = g
                        .slice_axis(Axis(1), ndarray::Slice::from(start..start + w))
                        .as_standard_layout()
                        .to_owned();
                    accumulate(&mut grads[p.0], sl);
                    start += w;
                }
            })),
        )
    }

    /// Channel slice `[lo, hi)` of a `(B, C, H, W)` node.
    pub fn slice_channels(&mut self, x: NodeId, lo: usize, hi: usize) -> NodeId {
        let full: Vec<usize> = self.shape(x).to_vec();
        let v = self.values[x.0]
            .slice_axis(Axis(1), ndarray::Slice::from(lo..hi))
            .as_standard_layout()
            .to_owned();
        self.push(
            v,
            Some(Box::new(move |_vals, g, grads| {
                let mut back = ArrayD::<f64>::zeros(IxDyn(&full));
                back.slice_axis_mut(Axis(1), ndarray::Slice::from(lo..hi))
                    .assign(g);
                accumulate(&mut grads[x.0], back);
            })),
        )
    }

    // ---- linear algebra ----

    /// `x (B, F) @ w^T (F, O) + b` -> `(B, O)`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let xv = self.values[x.0].view().into_dimensionality::<Ix2>().unwrap();
        let wv = self.values[w.0].view().into_dimensionality::<Ix2>().unwrap();
        let (n, f) = xv.dim();
        let (o, f2) = wv.dim();
        assert_eq!(f, f2, "linear: feature dims disagree");
        let mut y = xv.dot(&wv.t());
        if let Some(bid) = b {
            let bv = self.values[bid.0].view().into_dimensionality::<ndarray::Ix1>().unwrap();
            assert_eq!(bv.len(), o);
            y += &bv;
        }
        let _ = n;
        self.push(
            y.into_dyn(),
            Some(Box::new(move |vals, g, grads| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let xv = vals[x.0].view().into_dimensionality::<Ix2>().unwrap();
                let wv = vals[w.0].view().into_dimensionality::<Ix2>().unwrap();
                accumulate(&mut grads[x.0], g2.dot(&wv).into_dyn());
                accumulate(&mut grads[w.0], g2.t().dot(&xv).into_dyn());
                if let Some(bid) = b {
                    accumulate(&mut grads[bid.0], g2.sum_axis(Axis(0)).into_dyn());
                }
            })),
        )
    }

    /// Batched matmul `(M, N, K) @ (M, K, P) -> (M, N, P)`.
    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.values[a.0].view().into_dimensionality::<ndarray::Ix3>().unwrap();
        let bv = self.values[b.0].view().into_dimensionality::<ndarray::Ix3>().unwrap();
        let (m, n, k) = av.dim();
        let (m2, k2, p) = bv.dim();
        assert_eq!((m, k), (m2, k2), "bmm shape mismatch");
        let mut out = ndarray::Array3::<f64>::zeros((m, n, p));
        for i in 0..m {
            out.index_axis_mut(Axis(0), i)
                .assign(&av.index_axis(Axis(0), i).dot(&bv.index_axis(Axis(0), i)));
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |vals, g, grads| {
                let g3 = g.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                let av = vals[a.0].view().into_dimensionality::<ndarray::Ix3>().unwrap();
                let bv = vals[b.0].view().into_dimensionality::<ndarray::Ix3>().unwrap();
                let (m, n, k) = av.dim();
                let p = bv.dim().2;
                let mut da = ndarray::Array3::<f64>::zeros((m, n, k));
                let mut db = ndarray::Array3::<f64>::zeros((m, k, p));
                for i in 0..m {
                    let gi = g3.index_axis(Axis(0), i);
                    da.index_axis_mut(Axis(0), i)
                        .assign(&gi.dot(&bv.index_axis(Axis(0), i).t()));
                    db.index_axis_mut(Axis(0), i)
                        .assign(&av.index_axis(Axis(0), i).t().dot(&gi));
                }
                accumulate(&mut grads[a.0], da.into_dyn());
                accumulate(&mut grads[b.0], db.into_dyn());
            })),
        )
    }

    /// Batched matmul against a transposed right factor:
    /// `(M, N, K) @ (M, P, K)^T -> (M, N, P)`.
    pub fn bmm_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.values[a.0].view().into_dimensionality::<ndarray::Ix3>().unwrap();
        let bv = self.values[b.0].view().into_dimensionality::<ndarray::Ix3>().unwrap();
        let (m, n, k) = av.dim();
        let (m2, p, k2) = bv.dim();
        assert_eq!((m, k), (m2, k2), "bmm_nt shape mismatch");
        let mut out = ndarray::Array3::<f64>::zeros((m, n, p));
        for i in 0..m {
            out.index_axis_mut(Axis(0), i)
                .assign(&av.index_axis(Axis(0), i).dot(&bv.index_axis(Axis(0), i).t()));
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |vals, g, grads| {
                let g3 = g.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                let av = vals[a.0].view().into_dimensionality::<ndarray::Ix3>().unwrap();
                let bv = vals[b.0].view().into_dimensionality::<ndarray::Ix3>().unwrap();
                let (m, n, k) = av.dim();
                let p = bv.dim().1;
                let mut da = ndarray::Array3::<f64>::zeros((m, n, k));
                let mut db = ndarray::Array3::<f64>::zeros((m, p, k));
                for i in 0..m {
                    let gi = g3.index_axis(Axis(0), i);
                    da.index_axis_mut(Axis(0), i)
                        .assign(&gi.dot(&bv.index_axis(Axis(0), i)));
                    db.index_axis_mut(Axis(0), i)
                        .assign(&gi.t().dot(&av.index_axis(Axis(0), i)));
                }
                accumulate(&mut grads[a.0], da.into_dyn());
                accumulate(&mut grads[b.0], db.into_dyn());
            })),
        )
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, x: NodeId) -> NodeId {
        let mut v = self.values[x.0].clone();
        let last = v.ndim() - 1;
        for mut row in v.rows_mut() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|t| (t - max).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|t| t / sum);
        }
        let _ = last;
        let out = self.push(v, None);
        if !self.inference {
            let back: BackFn = Box::new(move |vals, g, grads| {
                let y = &vals[out.0];
                let mut dx = g.clone();
                for (mut drow, yrow) in dx.rows_mut().into_iter().zip(y.rows()) {
                    let dot: f64 = drow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum();
                    ndarray::Zip::from(&mut drow)
                        .and(&yrow)
                        .for_each(|d, &yv| *d = (*d - dot) * yv);
                }
                accumulate(&mut grads[x.0], dx);
            });
            self.backs[out.0] = Some(back);
        }
        out
    }

    // ---- reductions and losses ----

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.values[x.0].sum();
        let shape: Vec<usize> = self.shape(x).to_vec();
        self.push(
            ArrayD::from_elem(IxDyn(&[]), s),
            Some(Box::new(move |_vals, g, grads| {
                let gv = g[[]];
                accumulate(&mut grads[x.0], ArrayD::from_elem(IxDyn(&shape), gv));
            })),
        )
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.values[x.0].len() as f64;
        let s = self.sum_all(x);
        self.affine(s, 1.0 / n, 0.0)
    }

    /// Mean squared error against a constant target.
    pub fn mse_loss(&mut self, pred: NodeId, target: &ArrayD<f64>) -> NodeId {
        assert_eq!(self.shape(pred), target.shape(), "mse shape mismatch");
        let diff = &self.values[pred.0] - target;
        let n = diff.len() as f64;
        let v = diff.mapv(|d| d * d).sum() / n;
        let target = target.clone();
        self.push(
            ArrayD::from_elem(IxDyn(&[]), v),
            Some(Box::new(move |vals, g, grads| {
                let gv = g[[]];
                let d = (&vals[pred.0] - &target).mapv(|d| 2.0 * d * gv / n);
                accumulate(&mut grads[pred.0], d);
            })),
        )
    }

    /// Mean binary cross-entropy on logits against constant targets in
    /// `[0, 1]`, computed in the numerically stable form.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: &ArrayD<f64>) -> NodeId {
        assert_eq!(self.shape(logits), targets.shape(), "bce shape mismatch");
        let z = &self.values[logits.0];
        let n = z.len() as f64;
        let mut acc = 0.0;
        ndarray::Zip::from(z).and(targets).for_each(|&z, &y| {
            acc += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        });
        let v = acc / n;
        let targets = targets.clone();
        self.push(
            ArrayD::from_elem(IxDyn(&[]), v),
            Some(Box::new(move |vals, g, grads| {
                let gv = g[[]];
                let z = &vals[logits.0];
                let mut d = z.clone();
                ndarray::Zip::from(&mut d).and(&targets).for_each(|d, &y| {
                    let s = 1.0 / (1.0 + (-*d).exp());
                    *d = (s - y) * gv / n;
                });
                accumulate(&mut grads[logits.0], d);
            })),
        )
    }
}

/// Central finite difference of `eval` w.r.t. one scalar element of a
/// parameter; restores the original value. The evaluation closure must
/// recompute the loss from scratch, which keeps this oracle independent of
/// the tape's analytic path.
pub fn finite_diff_param_grad(
    store: &mut ParamStore,
    id: ParamId,
    elem: usize,
    h: f64,
    mut eval: impl FnMut(&ParamStore) -> f64,
) -> f64 {
    let orig = store.params[id.0].value.as_slice().unwrap()[elem];
    store.params[id.0].value.as_slice_mut().unwrap()[elem] = orig + h;
    let up = eval(store);
    store.params[id.0].value.as_slice_mut().unwrap()[elem] = orig - h;
    let down = eval(store);
    store.params[id.0].value.as_slice_mut().unwrap()[elem] = orig;
    (up - down) / (2.0 * h)
}

/// Relative error with an absolute floor so near-zero gradient pairs do not
/// blow up the ratio.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs()).max(1e-6);
    (a - b).abs() / scale
}

#[cfg(test)]
mod tests;
