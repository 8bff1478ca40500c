//! Reverse-mode automatic differentiation over a closed set of tensor ops.
//!
//! A [`Tape`] records one graph. Tensors a node needs for its vector-Jacobian
//! product are *saved* on the tape and registered with the tape's
//! [`MemoryLedger`](crate::tensor::MemoryLedger) until [`Tape::dispose`], so
//! the ledger measures exactly the activation memory a graph holds. Leaf
//! values belong to the caller and are never counted.
//!
//! Complex gradients follow the convention `grad = ∂L/∂re + i·∂L/∂im` for a
//! real-valued loss `L`, so a linear map's VJP is its adjoint.

use std::collections::{HashMap, HashSet};
use std::fmt::Debug;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{
    channels_to_complex, complex_to_channels, conv_nd, conv_nd_backward_input, conv_nd_backward_weight, fft_centered,
    ifft_centered, AllocId, AnyTensor, ComplexTensor, LedgerHandle, RealTensor, C64,
};

static NEXT_SCOPE: AtomicU64 = AtomicU64::new(1);

pub type NodeId = usize;

/// A linear map recorded as a single node whose VJP is supplied by the
/// caller (e.g. an implicitly differentiated linear solve).
pub trait ImplicitVjp: Send + Sync + Debug {
    fn vjp(&self, seed: &ComplexTensor) -> Result<ComplexTensor>;

    fn label(&self) -> &'static str {
        "implicit"
    }
}

#[derive(Debug, Clone)]
pub enum OpKind {
    Leaf,
    Add,
    Scale(f64),
    Relu,
    Conv,
    ComplexToChannels,
    ChannelsToComplex,
    Fft(Vec<usize>),
    Ifft(Vec<usize>),
    /// Elementwise real mask, broadcast over leading axes.
    MaskMultiply(Arc<RealTensor>),
    /// `[s...] -> [C, s...]`, `y_c = S_c ⊙ x`.
    SensitivityExpand(Arc<ComplexTensor>),
    /// `[C, s...] -> [s...]`, `y = Σ_c conj(S_c) ⊙ x_c`.
    SensitivityCombine(Arc<ComplexTensor>),
    /// Real part of `⟨a, b⟩`, as a one-element real tensor.
    InnerProduct,
    /// Mean over samples of `|re(x − t)| + |im(x − t)|`.
    L1Loss,
    Implicit(Arc<dyn ImplicitVjp>),
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Scale(_) => "scale",
            OpKind::Relu => "relu",
            OpKind::Conv => "conv",
            OpKind::ComplexToChannels => "complex_to_channels",
            OpKind::ChannelsToComplex => "channels_to_complex",
            OpKind::Fft(_) => "fft",
            OpKind::Ifft(_) => "ifft",
            OpKind::MaskMultiply(_) => "mask_multiply",
            OpKind::SensitivityExpand(_) => "sensitivity_expand",
            OpKind::SensitivityCombine(_) => "sensitivity_combine",
            OpKind::InnerProduct => "inner_product",
            OpKind::L1Loss => "l1_loss",
            OpKind::Implicit(op) => op.label(),
        }
    }
}

#[derive(Debug)]
pub struct NodeRecord {
    pub op: OpKind,
    pub inputs: Vec<NodeId>,
    saved: Vec<Arc<AnyTensor>>,
    pub shape: Vec<usize>,
    pub is_complex: bool,
}

impl NodeRecord {
    pub fn saved(&self) -> &[Arc<AnyTensor>] {
        &self.saved
    }
}

/// Handle to a value produced on a tape.
#[derive(Debug, Clone)]
pub struct Var {
    id: NodeId,
    scope: u64,
    value: Arc<AnyTensor>,
}

impl Var {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn value(&self) -> &AnyTensor {
        &self.value
    }

    pub fn real(&self) -> Result<&RealTensor> {
        self.value.as_real()
    }

    pub fn complex(&self) -> Result<&ComplexTensor> {
        self.value.as_complex()
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }
}

/// Gradients keyed by leaf node.
#[derive(Debug, Default)]
pub struct GradientMap {
    grads: HashMap<NodeId, AnyTensor>,
}

impl GradientMap {
    pub fn get(&self, leaf: &Var) -> Option<&AnyTensor> {
        self.grads.get(&leaf.id)
    }

    pub fn real(&self, leaf: &Var) -> Result<&RealTensor> {
        self.get(leaf).ok_or(Error::NodeNotOnTape(leaf.id))?.as_real()
    }

    pub fn complex(&self, leaf: &Var) -> Result<&ComplexTensor> {
        self.get(leaf).ok_or(Error::NodeNotOnTape(leaf.id))?.as_complex()
    }

    pub fn take(&mut self, leaf: &Var) -> Option<AnyTensor> {
        self.grads.remove(&leaf.id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// One recorded graph. Recording is append-only, so node order is a
/// topological order.
#[derive(Debug)]
pub struct Tape {
    scope: u64,
    nodes: Vec<NodeRecord>,
    ledger: LedgerHandle,
    retained: Vec<AllocId>,
    retained_set: HashSet<AllocId>,
    retained_bytes: usize,
    disposed: bool,
}

impl Tape {
    pub fn new(ledger: LedgerHandle) -> Self {
        Tape {
            scope: NEXT_SCOPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            ledger,
            retained: Vec::new(),
            retained_set: HashSet::new(),
            retained_bytes: 0,
            disposed: false,
        }
    }

    pub fn scope_id(&self) -> u64 {
        self.scope
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[NodeRecord] {
        &self.nodes
    }

    /// Bytes this tape currently holds in the ledger.
    pub fn retained_bytes(&self) -> usize {
        self.retained_bytes
    }

    pub fn is_disposed(&self) -> bool {
        self.disposed
    }

    pub fn ledger(&self) -> &LedgerHandle {
        &self.ledger
    }

    fn check_live(&self) -> Result<()> {
        if self.disposed {
            return Err(Error::TapeDisposed(self.scope));
        }
        Ok(())
    }

    fn check_var(&self, v: &Var) -> Result<()> {
        if v.scope != self.scope || v.id >= self.nodes.len() {
            return Err(Error::NodeNotOnTape(v.id));
        }
        Ok(())
    }

    /// Saves a tensor for the backward pass; non-leaf values are registered
    /// with the ledger once per allocation.
    fn save(&mut self, v: &Var, label: &'static str) -> Result<Arc<AnyTensor>> {
        if !matches!(self.nodes[v.id].op, OpKind::Leaf) {
            let id = v.value.alloc_id();
            if self.retained_set.insert(id) {
                let bytes = v.value.payload_bytes();
                self.ledger.lock().retain_bytes(id, bytes, label)?;
                self.retained.push(id);
                self.retained_bytes += bytes;
            }
        }
        Ok(Arc::clone(&v.value))
    }

    fn push(&mut self, op: OpKind, inputs: Vec<NodeId>, saved: Vec<Arc<AnyTensor>>, value: AnyTensor) -> Var {
        let id = self.nodes.len();
        self.nodes.push(NodeRecord {
            op,
            inputs,
            saved,
            shape: value.shape().to_vec(),
            is_complex: value.is_complex(),
        });
        Var {
            id,
            scope: self.scope,
            value: Arc::new(value),
        }
    }

    pub fn leaf(&mut self, value: impl Into<AnyTensor>) -> Result<Var> {
        self.check_live()?;
        Ok(self.push(OpKind::Leaf, vec![], vec![], value.into()))
    }

    pub fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.check_live()?;
        self.check_var(a)?;
        self.check_var(b)?;
        let out: AnyTensor = match (a.value(), b.value()) {
            (AnyTensor::Real(x), AnyTensor::Real(y)) => x.add(y)?.into(),
            (AnyTensor::Complex(x), AnyTensor::Complex(y)) => x.add(y)?.into(),
            _ => return Err(Error::TypeMismatch("add operands must have the same kind")),
        };
        Ok(self.push(OpKind::Add, vec![a.id, b.id], vec![], out))
    }

    pub fn scale(&mut self, a: &Var, s: f64) -> Result<Var> {
        self.check_live()?;
        self.check_var(a)?;
        let out = a.value().scale(s);
        Ok(self.push(OpKind::Scale(s), vec![a.id], vec![], out))
    }

    pub fn relu(&mut self, a: &Var) -> Result<Var> {
        self.check_live()?;
        self.check_var(a)?;
        let out = a.real()?.relu();
        let id = self.nodes.len();
        let var = self.push(OpKind::Relu, vec![a.id], vec![], out.into());
        let saved = self.save(&var, "relu")?;
        self.nodes[id].saved.push(saved);
        Ok(var)
    }

    pub fn conv(&mut self, x: &Var, w: &Var, b: &Var) -> Result<Var> {
        self.check_live()?;
        for v in [x, w, b] {
            self.check_var(v)?;
        }
        let out = conv_nd(x.real()?, w.real()?, b.real()?)?;
        let saved = vec![self.save(x, "conv_input")?, self.save(w, "conv_weight")?];
        Ok(self.push(OpKind::Conv, vec![x.id, w.id, b.id], saved, out.into()))
    }

    pub fn complex_to_channels(&mut self, x: &Var) -> Result<Var> {
        self.check_live()?;
        self.check_var(x)?;
        let out = complex_to_channels(x.complex()?)?;
        Ok(self.push(OpKind::ComplexToChannels, vec![x.id], vec![], out.into()))
    }

    pub fn channels_to_complex(&mut self, x: &Var) -> Result<Var> {
        self.check_live()?;
        self.check_var(x)?;
        let out = channels_to_complex(x.real()?)?;
        Ok(self.push(OpKind::ChannelsToComplex, vec![x.id], vec![], out.into()))
    }

    pub fn fft(&mut self, x: &Var, dims: &[usize]) -> Result<Var> {
        self.check_live()?;
        self.check_var(x)?;
        let out = fft_centered(x.complex()?, dims)?;
        Ok(self.push(OpKind::Fft(dims.to_vec()), vec![x.id], vec![], out.into()))
    }

    pub fn ifft(&mut self, x: &Var, dims: &[usize]) -> Result<Var> {
        self.check_live()?;
        self.check_var(x)?;
        let out = ifft_centered(x.complex()?, dims)?;
        Ok(self.push(OpKind::Ifft(dims.to_vec()), vec![x.id], vec![], out.into()))
    }

    pub fn mask_multiply(&mut self, x: &Var, mask: Arc<RealTensor>) -> Result<Var> {
        self.check_live()?;
        self.check_var(x)?;
        let out = apply_mask(x.complex()?, &mask)?;
        Ok(self.push(OpKind::MaskMultiply(mask), vec![x.id], vec![], out.into()))
    }

    pub fn sensitivity_expand(&mut self, x: &Var, sens: Arc<ComplexTensor>) -> Result<Var> {
        self.check_live()?;
        self.check_var(x)?;
        let out = sens_expand(x.complex()?, &sens)?;
        Ok(self.push(OpKind::SensitivityExpand(sens), vec![x.id], vec![], out.into()))
    }

    pub fn sensitivity_combine(&mut self, x: &Var, sens: Arc<ComplexTensor>) -> Result<Var> {
        self.check_live()?;
        self.check_var(x)?;
        let out = sens_combine(x.complex()?, &sens)?;
        Ok(self.push(OpKind::SensitivityCombine(sens), vec![x.id], vec![], out.into()))
    }

    pub fn inner_product(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.check_live()?;
        self.check_var(a)?;
        self.check_var(b)?;
        let v = match (a.value(), b.value()) {
            (AnyTensor::Real(x), AnyTensor::Real(y)) => x.inner_product(y)?,
            (AnyTensor::Complex(x), AnyTensor::Complex(y)) => x.real_inner(y)?,
            _ => return Err(Error::TypeMismatch("inner product operands must match")),
        };
        let saved = vec![self.save(a, "inner_lhs")?, self.save(b, "inner_rhs")?];
        let out = RealTensor::from_vec(&[1], vec![v])?;
        Ok(self.push(OpKind::InnerProduct, vec![a.id, b.id], saved, out.into()))
    }

    pub fn l1_loss(&mut self, x: &Var, target: &Var) -> Result<Var> {
        self.check_live()?;
        self.check_var(x)?;
        self.check_var(target)?;
        let diff = x.complex()?.sub(target.complex()?)?;
        let loss = l1_value(&diff);
        let id = self.nodes.len();
        let out = RealTensor::from_vec(&[1], vec![loss])?;
        let var = self.push(OpKind::L1Loss, vec![x.id, target.id], vec![], out.into());
        // The residual is an internal activation of this node.
        let diff_var = Var {
            id,
            scope: self.scope,
            value: Arc::new(diff.into()),
        };
        let saved = self.save(&diff_var, "l1_residual")?;
        self.nodes[id].saved.push(saved);
        Ok(var)
    }

    /// Records a linear node whose forward value was computed by the caller.
    pub fn implicit(&mut self, x: &Var, output: ComplexTensor, op: Arc<dyn ImplicitVjp>) -> Result<Var> {
        self.check_live()?;
        self.check_var(x)?;
        Ok(self.push(OpKind::Implicit(op), vec![x.id], vec![], output.into()))
    }

    /// Vector-Jacobian product of `output` with `seed`, for each leaf in `leaves`.
    /// Leaves the output does not depend on receive zero gradients.
    pub fn backward(&self, output: &Var, seed: AnyTensor, leaves: &[&Var]) -> Result<GradientMap> {
        self.check_live()?;
        self.check_var(output)?;
        for l in leaves {
            self.check_var(l)?;
            if !matches!(self.nodes[l.id].op, OpKind::Leaf) {
                return Err(Error::InvalidParameter(format!("node {} is not a leaf", l.id)));
            }
        }
        if seed.shape() != output.shape() || seed.is_complex() != output.value.is_complex() {
            return Err(Error::shape(output.shape(), seed.shape()));
        }
        let mut grads: Vec<Option<AnyTensor>> = (0..=output.id).map(|_| None).collect();
        grads[output.id] = Some(seed);
        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if matches!(node.op, OpKind::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            for (input, gi) in node.inputs.iter().zip(vjp(node, &g)?) {
                let Some(gi) = gi else { continue };
                match &mut grads[*input] {
                    Some(acc) => acc.accumulate(&gi)?,
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        let mut out = GradientMap::default();
        for l in leaves {
            let g = match grads[..].get_mut(l.id).and_then(Option::take) {
                Some(g) => g,
                None => zeros_like(l.value())?,
            };
            out.grads.insert(l.id, g);
        }
        Ok(out)
    }

    /// Releases every saved tensor from the ledger. Idempotent.
    pub fn dispose(&mut self) {
        if self.disposed {
            return;
        }
        let mut ledger = self.ledger.lock();
        for id in self.retained.drain(..) {
            // Only this tape retains these ids, so release cannot fail.
            let _ = ledger.release(id);
        }
        drop(ledger);
        self.retained_set.clear();
        self.retained_bytes = 0;
        self.nodes.clear();
        self.disposed = true;
    }
}

impl Drop for Tape {
    fn drop(&mut self) {
        self.dispose();
    }
}

fn zeros_like(v: &AnyTensor) -> Result<AnyTensor> {
    Ok(match v {
        AnyTensor::Real(t) => RealTensor::zeros(t.shape())?.into(),
        AnyTensor::Complex(t) => ComplexTensor::zeros(t.shape())?.into(),
    })
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn l1_value(diff: &ComplexTensor) -> f64 {
    diff.data().iter().map(|v| v.re.abs() + v.im.abs()).sum::<f64>() / diff.len() as f64
}

/// Multiplies by a real mask whose shape equals the trailing axes of `x`.
pub fn apply_mask(x: &ComplexTensor, mask: &RealTensor) -> Result<ComplexTensor> {
    let m = mask.len();
    if x.len() % m != 0 || !x.shape().ends_with(mask.shape()) {
        return Err(Error::shape(mask.shape(), x.shape()));
    }
    let mut out = x.clone();
    for chunk in out.data_mut().chunks_mut(m) {
        for (v, &w) in chunk.iter_mut().zip(mask.data()) {
            *v = *v * w;
        }
    }
    Ok(out)
}

fn sens_spatial(x_shape: &[usize], sens: &ComplexTensor) -> Result<usize> {
    let spatial = &sens.shape()[1..];
    if !x_shape.ends_with(spatial) {
        return Err(Error::shape(spatial, x_shape));
    }
    Ok(spatial.iter().product())
}

/// `x [s...] -> y [C, s...]` with `y_c = S_c ⊙ x`; `S` may cover only the
/// trailing axes of `x` and is then broadcast over the leading ones.
pub fn sens_expand(x: &ComplexTensor, sens: &ComplexTensor) -> Result<ComplexTensor> {
    let m = sens_spatial(x.shape(), sens)?;
    let coils = sens.shape()[0];
    let n = x.len();
    let mut shape = vec![coils];
    shape.extend_from_slice(x.shape());
    let mut out = ComplexTensor::zeros(&shape)?;
    let (xd, sd) = (x.data(), sens.data());
    let od = out.data_mut();
    for c in 0..coils {
        let s = &sd[c * m..(c + 1) * m];
        for (i, v) in od[c * n..(c + 1) * n].iter_mut().enumerate() {
            *v = s[i % m] * xd[i];
        }
    }
    Ok(out)
}

/// Adjoint of [`sens_expand`]: `y = Σ_c conj(S_c) ⊙ x_c`.
pub fn sens_combine(x: &ComplexTensor, sens: &ComplexTensor) -> Result<ComplexTensor> {
    let coils = sens.shape()[0];
    if x.shape().first() != Some(&coils) || x.rank() < 2 {
        return Err(Error::shape(sens.shape(), x.shape()));
    }
    let m = sens_spatial(&x.shape()[1..], sens)?;
    let n = x.len() / coils;
    let mut out = ComplexTensor::zeros(&x.shape()[1..])?;
    let (xd, sd) = (x.data(), sens.data());
    let od = out.data_mut();
    for c in 0..coils {
        let s = &sd[c * m..(c + 1) * m];
        for (i, v) in od.iter_mut().enumerate() {
            *v += s[i % m].conj() * xd[c * n + i];
        }
    }
    Ok(out)
}

/// Gradients for each input of `node`, given the gradient of its output.
fn vjp(node: &NodeRecord, g: &AnyTensor) -> Result<Vec<Option<AnyTensor>>> {
    Ok(match &node.op {
        OpKind::Leaf => vec![],
        OpKind::Add => vec![Some(g.clone()), Some(g.clone())],
        OpKind::Scale(s) => vec![Some(g.scale(*s))],
        OpKind::Relu => {
            let y = node.saved[0].as_real()?;
            let g = g.as_real()?;
            let gx = g.zip_with(y, |gv, yv| if yv > 0.0 { gv } else { 0.0 })?;
            vec![Some(gx.into())]
        }
        OpKind::Conv => {
            let x = node.saved[0].as_real()?;
            let w = node.saved[1].as_real()?;
            let g = g.as_real()?;
            let gx = conv_nd_backward_input(g, w, x.shape())?;
            let (gw, gb) = conv_nd_backward_weight(g, x, w.shape())?;
            vec![Some(gx.into()), Some(gw.into()), Some(gb.into())]
        }
        OpKind::ComplexToChannels => vec![Some(channels_to_complex(g.as_real()?)?.into())],
        OpKind::ChannelsToComplex => vec![Some(complex_to_channels(g.as_complex()?)?.into())],
        OpKind::Fft(dims) => vec![Some(ifft_centered(g.as_complex()?, dims)?.into())],
        OpKind::Ifft(dims) => vec![Some(fft_centered(g.as_complex()?, dims)?.into())],
        OpKind::MaskMultiply(m) => vec![Some(apply_mask(g.as_complex()?, m)?.into())],
        OpKind::SensitivityExpand(s) => vec![Some(sens_combine(g.as_complex()?, s)?.into())],
        OpKind::SensitivityCombine(s) => vec![Some(sens_expand(g.as_complex()?, s)?.into())],
        OpKind::InnerProduct => {
            let s = g.as_real()?.data()[0];
            let (a, b) = (&node.saved[0], &node.saved[1]);
            vec![Some(b.scale(s)), Some(a.scale(s))]
        }
        OpKind::L1Loss => {
            let s = g.as_real()?.data()[0];
            let diff = node.saved[0].as_complex()?;
            let k = s / diff.len() as f64;
            let gx = diff.map(|d| C64::new(k * sign(d.re), k * sign(d.im)));
            let gt = gx.scale(-1.0);
            vec![Some(gx.into()), Some(gt.into())]
        }
        OpKind::Implicit(op) => vec![Some(op.vjp(g.as_complex()?)?.into())],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rreal(shape: &[usize], rng: &mut ChaCha8Rng) -> RealTensor {
        RealTensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)).unwrap()
    }

    fn rcomplex(shape: &[usize], rng: &mut ChaCha8Rng) -> ComplexTensor {
        ComplexTensor::from_fn(shape, |_| {
            C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        })
        .unwrap()
    }

    fn one() -> AnyTensor {
        RealTensor::from_vec(&[1], vec![1.0]).unwrap().into()
    }

    #[test]
    fn recording_does_not_change_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new(LedgerHandle::new());
        let (x, y) = (rreal(&[3, 3], &mut rng), rreal(&[3, 3], &mut rng));
        let a = tape.leaf(x.clone()).unwrap();
        let b = tape.leaf(y.clone()).unwrap();
        let s = tape.add(&a, &b).unwrap();
        assert_eq!(s.real().unwrap(), &x.add(&y).unwrap());
        assert_eq!(tape.len(), 3);
    }

    #[test]
    fn scale_gradient() {
        let mut tape = Tape::new(LedgerHandle::new());
        let x = tape.leaf(RealTensor::full(&[4], 2.0).unwrap()).unwrap();
        let y = tape.scale(&x, 3.0).unwrap();
        let g = tape
            .backward(&y, RealTensor::full(&[4], 1.0).unwrap().into(), &[&x])
            .unwrap();
        assert_eq!(g.real(&x).unwrap(), &RealTensor::full(&[4], 3.0).unwrap());
    }

    #[test]
    fn relu_passes_positive_and_blocks_zero() {
        let mut tape = Tape::new(LedgerHandle::new());
        let x = tape
            .leaf(RealTensor::from_vec(&[3], vec![2.0, 0.0, -1.0]).unwrap())
            .unwrap();
        let y = tape.relu(&x).unwrap();
        let seed = RealTensor::from_vec(&[3], vec![5.0, 7.0, 9.0]).unwrap();
        let g = tape.backward(&y, seed.into(), &[&x]).unwrap();
        assert_eq!(g.real(&x).unwrap().data(), &[5.0, 0.0, 0.0]);
    }

    #[test]
    fn retained_bytes_for_conv_relu_add_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ledger = LedgerHandle::new();
        let mut tape = Tape::new(ledger.clone());
        let x = tape.leaf(rreal(&[2, 4, 4], &mut rng)).unwrap();
        let w = tape.leaf(rreal(&[3, 2, 3, 3], &mut rng)).unwrap();
        let b = tape.leaf(rreal(&[3], &mut rng)).unwrap();
        let w2 = tape.leaf(rreal(&[3, 3, 3, 3], &mut rng)).unwrap();
        let h = tape.conv(&x, &w, &b).unwrap(); // saves leaves only: 0 bytes
        assert_eq!(tape.retained_bytes(), 0);
        let r = tape.relu(&h).unwrap(); // saves relu output: 3*16 reals
        assert_eq!(tape.retained_bytes(), 48 * 8);
        let h2 = tape.conv(&r, &w2, &b).unwrap(); // reuses the relu output
        assert_eq!(tape.retained_bytes(), 48 * 8);
        let _s = tape.add(&h2, &h).unwrap(); // saves nothing
        assert_eq!(tape.retained_bytes(), 384);
        assert_eq!(ledger.live_bytes(), 384);
        tape.dispose();
        assert_eq!(ledger.live_bytes(), 0);
        tape.dispose();
        assert!(matches!(tape.leaf(rreal(&[1], &mut rng)), Err(Error::TapeDisposed(_))));
    }

    #[test]
    fn dropping_a_tape_releases_its_bytes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ledger = LedgerHandle::new();
        {
            let mut tape = Tape::new(ledger.clone());
            let x = tape.leaf(rreal(&[8], &mut rng)).unwrap();
            let y = tape.scale(&x, 2.0).unwrap();
            tape.relu(&y).unwrap();
            assert_eq!(ledger.live_bytes(), 64);
        }
        assert_eq!(ledger.live_bytes(), 0);
    }

    #[test]
    fn leaf_from_other_tape_is_rejected() {
        let mut t1 = Tape::new(LedgerHandle::new());
        let mut t2 = Tape::new(LedgerHandle::new());
        let a = t1.leaf(RealTensor::zeros(&[2]).unwrap()).unwrap();
        let b = t2.leaf(RealTensor::zeros(&[2]).unwrap()).unwrap();
        assert!(matches!(t2.add(&a, &b), Err(Error::NodeNotOnTape(_))));
        let y = t2.scale(&b, 1.0).unwrap();
        assert!(t2.backward(&y, RealTensor::zeros(&[2]).unwrap().into(), &[&a]).is_err());
        assert!(t2.backward(&y, RealTensor::zeros(&[3]).unwrap().into(), &[&b]).is_err());
    }

    /// Scalar loss through every op kind: conv → relu → conv → complex → fft
    /// → mask → sensitivities → inner product with a fixed tensor.
    fn composite(
        tape: &mut Tape,
        x: &Var,
        w1: &Var,
        b1: &Var,
        w2: &Var,
        b2: &Var,
        ctx: &(Arc<RealTensor>, Arc<ComplexTensor>, ComplexTensor),
    ) -> Var {
        let h = tape.complex_to_channels(x).unwrap();
        let h = tape.conv(&h, w1, b1).unwrap();
        let h = tape.relu(&h).unwrap();
        let h = tape.conv(&h, w2, b2).unwrap();
        let z = tape.channels_to_complex(&h).unwrap();
        let z = tape.scale(&z, 0.7).unwrap();
        let z = tape.add(&z, x).unwrap();
        let k = tape.fft(&z, &[0, 1]).unwrap();
        let k = tape.mask_multiply(&k, ctx.0.clone()).unwrap();
        let im = tape.ifft(&k, &[0, 1]).unwrap();
        let coils = tape.sensitivity_expand(&im, ctx.1.clone()).unwrap();
        let back = tape.sensitivity_combine(&coils, ctx.1.clone()).unwrap();
        let t = tape.leaf(ctx.2.clone()).unwrap();
        let a = tape.inner_product(&back, &t).unwrap();
        let l = tape.l1_loss(&back, &t).unwrap();
        tape.add(&a, &l).unwrap()
    }

    #[test]
    fn composite_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0 = rcomplex(&[4, 4], &mut rng);
        let params = [
            rreal(&[3, 2, 3, 3], &mut rng),
            rreal(&[3], &mut rng),
            rreal(&[2, 3, 3, 3], &mut rng),
            rreal(&[2], &mut rng),
        ];
        let mask = Arc::new(RealTensor::from_fn(&[4, 4], |i| (i % 3 != 0) as u8 as f64).unwrap());
        let sens = Arc::new(rcomplex(&[2, 4, 4], &mut rng));
        let ctx = (mask, sens, rcomplex(&[4, 4], &mut rng));

        let eval = |x: &ComplexTensor, p: &[RealTensor; 4]| -> f64 {
            let mut tape = Tape::new(LedgerHandle::new());
            let xv = tape.leaf(x.clone()).unwrap();
            let v: Vec<Var> = p.iter().map(|t| tape.leaf(t.clone()).unwrap()).collect();
            let out = composite(&mut tape, &xv, &v[0], &v[1], &v[2], &v[3], &ctx);
            out.real().unwrap().data()[0]
        };

        let mut tape = Tape::new(LedgerHandle::new());
        let xv = tape.leaf(x0.clone()).unwrap();
        let v: Vec<Var> = params.iter().map(|t| tape.leaf(t.clone()).unwrap()).collect();
        let out = composite(&mut tape, &xv, &v[0], &v[1], &v[2], &v[3], &ctx);
        let leaves: Vec<&Var> = std::iter::once(&xv).chain(v.iter()).collect();
        let grads = tape.backward(&out, one(), &leaves).unwrap();

        let h = 1e-6;
        let check = |fd: f64, g: f64| {
            assert!((fd - g).abs() <= 1e-6f64.max(1e-4 * g.abs()), "fd {fd} vs grad {g}");
        };
        for (k, p) in params.iter().enumerate() {
            let g = grads.real(&v[k]).unwrap();
            for i in 0..p.len() {
                let mut pp = params.clone();
                pp[k].data_mut()[i] += h;
                let fp = eval(&x0, &pp);
                pp[k].data_mut()[i] -= 2.0 * h;
                let fm = eval(&x0, &pp);
                check((fp - fm) / (2.0 * h), g.data()[i]);
            }
        }
        let gx = grads.complex(&xv).unwrap();
        for i in 0..x0.len() {
            for (dir, part) in [(C64::new(h, 0.0), 0), (C64::new(0.0, h), 1)] {
                let mut xp = x0.clone();
                xp.data_mut()[i] += dir;
                let fp = eval(&xp, &params);
                xp.data_mut()[i] -= dir * 2.0;
                let fm = eval(&xp, &params);
                let want = if part == 0 { gx.data()[i].re } else { gx.data()[i].im };
                check((fp - fm) / (2.0 * h), want);
            }
        }
    }

    #[test]
    fn conv_energy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rreal(&[1, 4, 4], &mut rng);
        let w0 = rreal(&[1, 1, 3, 3], &mut rng);
        let b = RealTensor::zeros(&[1]).unwrap();
        let energy = |w: &RealTensor| conv_nd(&x, w, &b).unwrap().norm_sqr() / 2.0;

        let mut tape = Tape::new(LedgerHandle::new());
        let xv = tape.leaf(x.clone()).unwrap();
        let wv = tape.leaf(w0.clone()).unwrap();
        let bv = tape.leaf(b.clone()).unwrap();
        let y = tape.conv(&xv, &wv, &bv).unwrap();
        let e = tape.inner_product(&y, &y).unwrap();
        let e = tape.scale(&e, 0.5).unwrap();
        let g = tape.backward(&e, one(), &[&wv]).unwrap();
        let g = g.real(&wv).unwrap();
        let h = 1e-6;
        for i in 0..w0.len() {
            let mut wp = w0.clone();
            wp.data_mut()[i] += h;
            let fp = energy(&wp);
            wp.data_mut()[i] -= 2.0 * h;
            let fd = (fp - energy(&wp)) / (2.0 * h);
            assert!((fd - g.data()[i]).abs() <= 1e-6 * g.data()[i].abs().max(1.0));
        }
    }

    #[test]
    fn vjp_is_linear_in_the_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut tape = Tape::new(LedgerHandle::new());
        let x = tape.leaf(rcomplex(&[4, 4], &mut rng)).unwrap();
        let w = tape.leaf(rreal(&[2, 2, 3, 3], &mut rng)).unwrap();
        let b = tape.leaf(rreal(&[2], &mut rng)).unwrap();
        let h = tape.complex_to_channels(&x).unwrap();
        let h = tape.conv(&h, &w, &b).unwrap();
        let h = tape.relu(&h).unwrap();
        let y = tape.channels_to_complex(&h).unwrap();
        let s1 = rcomplex(&[4, 4], &mut rng);
        let s2 = rcomplex(&[4, 4], &mut rng);
        let (a, c) = (1.7, -0.4);
        let mix = s1.scale(a).add(&s2.scale(c)).unwrap();
        let g1 = tape.backward(&y, s1.into(), &[&x, &w]).unwrap();
        let g2 = tape.backward(&y, s2.into(), &[&x, &w]).unwrap();
        let gm = tape.backward(&y, mix.into(), &[&x, &w]).unwrap();
        let lin_w = g1
            .real(&w)
            .unwrap()
            .scale(a)
            .add(&g2.real(&w).unwrap().scale(c))
            .unwrap();
        assert!(gm.real(&w).unwrap().sub(&lin_w).unwrap().max_abs() < 1e-12);
        let lin_x = g1
            .complex(&x)
            .unwrap()
            .scale(a)
            .add(&g2.complex(&x).unwrap().scale(c))
            .unwrap();
        assert!(gm.complex(&x).unwrap().sub(&lin_x).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn l1_loss_values() {
        let mut tape = Tape::new(LedgerHandle::new());
        let t = ComplexTensor::full(&[3, 3], C64::new(0.5, -0.25)).unwrap();
        let x = ComplexTensor::full(&[3, 3], C64::new(1.5, -0.25)).unwrap();
        let tv = tape.leaf(t.clone()).unwrap();
        let xv = tape.leaf(x).unwrap();
        let l = tape.l1_loss(&xv, &tv).unwrap();
        assert_eq!(l.real().unwrap().data()[0], 1.0);
        let l0 = tape.l1_loss(&tv, &tv).unwrap();
        assert_eq!(l0.real().unwrap().data()[0], 0.0);
        let g = tape.backward(&l0, one(), &[&tv]).unwrap();
        assert_eq!(g.complex(&tv).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn unreached_leaf_gets_zero_gradient() {
        let mut tape = Tape::new(LedgerHandle::new());
        let a = tape.leaf(RealTensor::full(&[2], 1.0).unwrap()).unwrap();
        let b = tape.leaf(RealTensor::full(&[3], 1.0).unwrap()).unwrap();
        let y = tape.scale(&a, 2.0).unwrap();
        let g = tape
            .backward(&y, RealTensor::full(&[2], 1.0).unwrap().into(), &[&b])
            .unwrap();
        assert_eq!(g.real(&b).unwrap(), &RealTensor::zeros(&[3]).unwrap());
    }
}
