//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its output value, its input nodes, and a [`Backward`] rule. Nodes are
//! appended in execution order, so the tape is a DAG in topological order
//! by construction. [`Tape::backward`] walks it in reverse and returns the
//! gradient of a scalar loss with respect to every leaf that requires one.
//!
//! Trainable weights live in a [`ParamStore`] outside the tape. A parameter
//! enters a tape through [`Tape::param`]; after backward,
//! [`Gradients::accumulate`] adds the result into each parameter's gradient
//! accumulator, so repeated uses and repeated backward calls sum.

use std::collections::HashMap;
use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Precision, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Gradient rule of one recorded operation.
///
/// Rules receive the forward values of their inputs and output from the
/// tape; anything else they need (argmax positions, normalization
/// statistics) is saved in the implementing struct.
pub trait Backward {
    fn name(&self) -> &'static str;

    /// Vector-Jacobian product: gradients with respect to each input, given
    /// the gradient of the output. Entries whose `needs` flag is false may be
    /// `None`.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>>;
}

enum Source {
    Constant,
    Input,
    Param(ParamId),
    Op(Box<dyn Backward>),
}

struct Node {
    value: Tensor,
    inputs: Vec<Var>,
    source: Source,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.len())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Node {
            value,
            inputs: Vec::new(),
            source: Source::Constant,
            requires_grad: false,
        })
    }

    /// A leaf whose gradient is reported by [`Tape::backward`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(Node {
            value,
            inputs: Vec::new(),
            source: Source::Input,
            requires_grad: true,
        })
    }

    /// Places a parameter on the tape. Repeated calls return the same node,
    /// so all uses share one gradient slot.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let p = store.get(id);
        let var = self.push(Node {
            value: p.value.clone(),
            inputs: Vec::new(),
            source: Source::Param(id),
            requires_grad: p.trainable,
        });
        self.param_nodes.insert(id, var);
        var
    }

    /// Records the output of an operation together with its gradient rule.
    pub fn record(&mut self, value: Tensor, inputs: &[Var], op: impl Backward + 'static) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Node {
            value,
            inputs: inputs.to_vec(),
            source: Source::Op(Box::new(op)),
            requires_grad,
        })
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Name of the rule that produced `v` ("constant", "input", "param" for leaves).
    pub fn op_name(&self, v: Var) -> &'static str {
        match &self.nodes[v.0].source {
            Source::Constant => "constant",
            Source::Input => "input",
            Source::Param(_) => "param",
            Source::Op(op) => op.name(),
        }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Autodiff("backward on an empty tape".into()));
        }
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.len() != 1 {
            return Err(Error::Autodiff(format!(
                "loss must be scalar, got shape {}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(
            loss_value.shape().clone(),
            vec![1.0],
            loss_value.precision(),
        )?);
        let mut leaves = HashMap::new();
        for i in (0..=loss.0).rev() {
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            match &node.source {
                Source::Constant => {}
                Source::Input | Source::Param(_) => {
                    leaves.insert(Var(i), grad);
                }
                Source::Op(op) => {
                    if !node.requires_grad {
                        continue;
                    }
                    let inputs: Vec<&Tensor> =
                        node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                    let needs: Vec<bool> = node
                        .inputs
                        .iter()
                        .map(|v| self.nodes[v.0].requires_grad)
                        .collect();
                    let input_grads = op.backward(&inputs, &node.value, &grad, &needs)?;
                    if input_grads.len() != node.inputs.len() {
                        return Err(Error::Autodiff(format!(
                            "{} returned {} gradients for {} inputs",
                            op.name(),
                            input_grads.len(),
                            node.inputs.len()
                        )));
                    }
                    for ((&input, g), &need) in node.inputs.iter().zip(input_grads).zip(&needs) {
                        let (Some(g), true) = (g, need) else { continue };
                        if g.shape() != self.nodes[input.0].value.shape() {
                            return Err(Error::Autodiff(format!(
                                "{} produced gradient of shape {} for input of shape {}",
                                op.name(),
                                g.shape(),
                                self.nodes[input.0].value.shape()
                            )));
                        }
                        grads[input.0] = Some(match grads[input.0].take() {
                            Some(acc) => acc.add(&g)?,
                            None => g,
                        });
                    }
                }
            }
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.source {
                Source::Param(id) => Some((id, Var(i))),
                _ => None,
            })
            .collect();
        Ok(Gradients { leaves, params })
    }
}

/// Leaf gradients from one backward sweep.
#[derive(Debug)]
pub struct Gradients {
    leaves: HashMap<Var, Tensor>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of a leaf, or `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v)
    }

    /// Adds every parameter gradient into its accumulator in `store`.
    pub fn accumulate(&self, store: &mut ParamStore) -> Result<()> {
        for &(id, var) in &self.params {
            if let Some(g) = self.leaves.get(&var) {
                let p = store.get_mut(id);
                p.grad = p.grad.add(g)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named tensor with a gradient accumulator of the same shape.
///
/// Non-trainable entries (normalization running statistics) share the store
/// so checkpoints capture them, but never receive gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: String, value: Tensor, trainable: bool) -> ParamId {
        let grad = value.zeros_like();
        self.params.push(Parameter {
            name,
            value,
            grad,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.insert(name.into(), value, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.insert(name.into(), value, false)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = p.value.zeros_like();
        }
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if value.shape() != p.value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_value",
                lhs: p.value.shape().clone(),
                rhs: value.shape().clone(),
            });
        }
        p.value = value;
        Ok(())
    }
}

/// Relative finite-difference step: `h = STEP_SCALE · (|x| + 1)`.
pub const FD_STEP_SCALE: f64 = 1e-4;

/// Step scales tried in turn while a coordinate still disagrees. A probe
/// that straddles a ReLU or max-selection kink agrees again at a smaller
/// step; a wrong backward rule disagrees at every step.
pub const FD_STEP_LADDER: [f64; 5] = [FD_STEP_SCALE, 3e-5, 1e-5, 3e-6, 1e-6];

/// Magnitudes below this are treated as this when forming relative errors,
/// so coordinates with (near-)zero gradient are judged in absolute terms.
/// Central differences of an O(1) function carry about 1e-12 of rounding
/// noise at the default step, which this floor keeps well under 1e-4.
pub const FD_DISCREPANCY_FLOOR: f64 = 1e-6;

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub label: String,
    pub checked: usize,
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_discrepancy: f64,
    /// Coordinate (flat index within its tensor, with the tensor's label)
    /// where `max_discrepancy` occurred.
    pub worst: Option<(String, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    /// Set when a probe produced NaN/Inf.
    pub non_finite_at: Option<(String, usize)>,
    pub tol: f64,
    pub passed: bool,
}

fn discrepancy(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_DISCREPANCY_FLOOR)
}

impl GradCheckReport {
    fn new(label: impl Into<String>, tol: f64) -> Self {
        GradCheckReport {
            label: label.into(),
            checked: 0,
            max_discrepancy: 0.0,
            worst: None,
            analytic_at_worst: 0.0,
            numeric_at_worst: 0.0,
            non_finite_at: None,
            tol,
            passed: true,
        }
    }

    fn record(&mut self, tensor: &str, index: usize, analytic: f64, numeric: f64) {
        self.checked += 1;
        let d = discrepancy(analytic, numeric);
        if d > self.max_discrepancy || self.worst.is_none() {
            self.max_discrepancy = d;
            self.worst = Some((tensor.to_string(), index));
            self.analytic_at_worst = analytic;
            self.numeric_at_worst = numeric;
        }
        if d >= self.tol {
            self.passed = false;
        }
    }

    fn non_finite(&mut self, tensor: &str, index: usize) {
        self.non_finite_at = Some((tensor.to_string(), index));
        self.passed = false;
    }

    /// Merges `other` into `self`, keeping the worst case.
    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        if other.max_discrepancy > self.max_discrepancy || self.worst.is_none() {
            self.max_discrepancy = other.max_discrepancy;
            self.worst = other.worst;
            self.analytic_at_worst = other.analytic_at_worst;
            self.numeric_at_worst = other.numeric_at_worst;
        }
        if self.non_finite_at.is_none() {
            self.non_finite_at = other.non_finite_at;
        }
        self.passed &= other.passed;
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: {} coords, max rel. discrepancy {:.3e} (tol {:.0e})",
            if self.passed { "PASS" } else { "FAIL" },
            self.label,
            self.checked,
            self.max_discrepancy,
            self.tol
        )?;
        if let Some((t, i)) = &self.worst {
            write!(
                f,
                ", worst at {t}[{i}] analytic {:.6e} numeric {:.6e}",
                self.analytic_at_worst, self.numeric_at_worst
            )?;
        }
        if let Some((t, i)) = &self.non_finite_at {
            write!(f, ", non-finite probe at {t}[{i}]")?;
        }
        Ok(())
    }
}

/// Which coordinates of each tensor a check probes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coords {
    All,
    /// At most `per_tensor` coordinates chosen uniformly with `seed`.
    Sample { per_tensor: usize, seed: u64 },
}

impl Coords {
    fn select(self, len: usize, salt: u64) -> Vec<usize> {
        match self {
            Coords::All => (0..len).collect(),
            Coords::Sample { per_tensor, seed } if per_tensor < len => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
                let mut idx = sample(&mut rng, len, per_tensor).into_vec();
                idx.sort_unstable();
                idx
            }
            Coords::Sample { .. } => (0..len).collect(),
        }
    }
}


fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.len() != 1 {
        return Err(Error::Autodiff(format!(
            "checked function must return a scalar, got shape {}",
            t.shape()
        )));
    }
    Ok(t.data()[0])
}

fn probe(
    report: &mut GradCheckReport,
    label: &str,
    base: &Tensor,
    analytic: &[f64],
    coords: &[usize],
    mut eval: impl FnMut(Tensor) -> Result<f64>,
) -> Result<()> {
    'coords: for &i in coords {
        if !analytic[i].is_finite() {
            report.non_finite(label, i);
            return Ok(());
        }
        let mut best: Option<f64> = None;
        for scale in FD_STEP_LADDER {
            let h = scale * (base.data()[i].abs() + 1.0);
            let mut side = [0.0; 2];
            for (slot, sign) in side.iter_mut().zip([1.0, -1.0]) {
                let mut data = base.data().to_vec();
                data[i] += sign * h;
                let shifted = Tensor::new(base.shape().clone(), data, base.precision())?;
                match eval(shifted) {
                    Ok(v) => *slot = v,
                    Err(Error::NonFinite { .. }) => {
                        report.non_finite(label, i);
                        return Ok(());
                    }
                    Err(e) => return Err(e),
                }
            }
            let numeric = (side[0] - side[1]) / (2.0 * h);
            if !numeric.is_finite() {
                report.non_finite(label, i);
                return Ok(());
            }
            if best.is_none_or(|b| discrepancy(analytic[i], numeric) < discrepancy(analytic[i], b)) {
                best = Some(numeric);
            }
            if discrepancy(analytic[i], numeric) < report.tol {
                report.record(label, i, analytic[i], numeric);
                continue 'coords;
            }
        }
        report.record(label, i, analytic[i], best.expect("ladder is nonempty"));
    }
    Ok(())
}

/// Compares the tape gradient of the scalar function `f` at `at` with
/// central finite differences over every coordinate of `at`.
pub fn finite_diff_check<F>(f: F, at: &Tensor, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    finite_diff_check_coords(f, at, tol, Coords::All, "x")
}

pub fn finite_diff_check_coords<F>(
    f: F,
    at: &Tensor,
    tol: f64,
    coords: Coords,
    label: &str,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    require_f64(at)?;
    let mut report = GradCheckReport::new(label, tol);
    let mut tape = Tape::new();
    let x = tape.input(at.clone());
    let out = f(&mut tape, x)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward(out)?;
    let analytic = match grads.get(x) {
        Some(g) => g.data().to_vec(),
        None => vec![0.0; at.len()],
    };
    let selected = coords.select(at.len(), 0);
    probe(&mut report, label, at, &analytic, &selected, |shifted| {
        let mut tape = Tape::new();
        let x = tape.input(shifted);
        let out = f(&mut tape, x)?;
        scalar_of(&tape, out)
    })?;
    Ok(report)
}

/// Finite-difference check of a scalar function of the trainable
/// parameters in `store` (optionally also of an input tensor, via the
/// closure's own captures).
pub fn finite_diff_check_params<F>(
    f: F,
    store: &ParamStore,
    tol: f64,
    coords: Coords,
    label: &str,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut report = GradCheckReport::new(label, tol);
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward(out)?;
    let mut with_grads = store.clone();
    with_grads.zero_grad();
    grads.accumulate(&mut with_grads)?;
    for (id, p) in store.iter().filter(|(_, p)| p.trainable) {
        require_f64(&p.value)?;
        let analytic = with_grads.get(id).grad.data().to_vec();
        let selected = coords.select(p.value.len(), id.index() as u64 + 1);
        let mut scratch = store.clone();
        probe(&mut report, &p.name, &p.value, &analytic, &selected, |shifted| {
            scratch.set_value(id, shifted)?;
            let mut tape = Tape::new();
            let out = f(&mut tape, &scratch)?;
            scalar_of(&tape, out)
        })?;
    }
    Ok(report)
}

fn require_f64(t: &Tensor) -> Result<()> {
    if t.precision() != Precision::F64 {
        return Err(Error::invalid(
            "finite-difference checks require 64-bit tensors",
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const P: Precision = Precision::F64;

    struct SumAll;
    impl Backward for SumAll {
        fn name(&self) -> &'static str {
            "sum"
        }
        fn backward(
            &self,
            inputs: &[&Tensor],
            _output: &Tensor,
            grad: &Tensor,
            _needs: &[bool],
        ) -> Result<Vec<Option<Tensor>>> {
            Ok(vec![Some(Tensor::full(inputs[0].dims(), grad.data()[0], P)?)])
        }
    }

    fn sum(tape: &mut Tape, x: Var) -> Var {
        let s = tape.value(x).sum_all();
        tape.record(Tensor::scalar(s, P).unwrap(), &[x], SumAll)
    }

    #[test]
    fn empty_tape_and_non_scalar_rejected() {
        let tape = Tape::new();
        assert!(tape.backward(Var(0)).is_err());
        let mut tape = Tape::new();
        let x = tape.input(Tensor::ones(&[2], P).unwrap());
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn sum_gives_ones() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::from_fn(&[2, 3], P, |i| i as f64).unwrap());
        assert_eq!(store.get(id).grad.max_abs(), 0.0);
        let mut tape = Tape::new();
        let p = tape.param(&store, id);
        let loss = sum(&mut tape, p);
        tape.backward(loss).unwrap().accumulate(&mut store).unwrap();
        assert_eq!(store.get(id).grad, Tensor::ones(&[2, 3], P).unwrap());
        // second backward without reset doubles exactly
        tape.backward(loss).unwrap().accumulate(&mut store).unwrap();
        assert_eq!(store.get(id).grad, Tensor::full(&[2, 3], 2.0, P).unwrap());
        store.zero_grad();
        assert_eq!(store.get(id).grad.max_abs(), 0.0);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::ones(&[3], P).unwrap());
        let loss = sum(&mut tape, c);
        assert!(!tape.requires_grad(loss));
        let g = tape.backward(loss).unwrap();
        assert!(g.get(c).is_none());
    }

    #[test]
    fn identity_check_is_exact() {
        let at = Tensor::from_fn(&[4], P, |i| i as f64 - 1.5).unwrap();
        let r = finite_diff_check(|t, x| Ok(sum(t, x)), &at, 1e-10).unwrap();
        assert!(r.passed, "{r}");
        assert!(r.max_discrepancy < 1e-10);
        assert_eq!(r.checked, 4);
    }

    #[test]
    fn f32_inputs_rejected() {
        let at = Tensor::ones(&[2], Precision::F32).unwrap();
        assert!(finite_diff_check(|t, x| Ok(sum(t, x)), &at, 1e-4).is_err());
    }

    #[test]
    fn wrong_gradient_fails() {
        struct BadSum;
        impl Backward for BadSum {
            fn name(&self) -> &'static str {
                "bad_sum"
            }
            fn backward(
                &self,
                inputs: &[&Tensor],
                _: &Tensor,
                _: &Tensor,
                _: &[bool],
            ) -> Result<Vec<Option<Tensor>>> {
                Ok(vec![Some(Tensor::full(inputs[0].dims(), -1.0, P)?)])
            }
        }
        let at = Tensor::ones(&[3], P).unwrap();
        let r = finite_diff_check(
            |t, x| {
                let s = t.value(x).sum_all();
                Ok(t.record(Tensor::scalar(s, P)?, &[x], BadSum))
            },
            &at,
            1e-4,
        )
        .unwrap();
        assert!(!r.passed);
        assert!((r.max_discrepancy - 2.0).abs() < 1e-6);
    }

    #[test]
    fn smaller_steps_resolve_a_nearby_kink() {
        struct Relu;
        impl Backward for Relu {
            fn name(&self) -> &'static str {
                "relu"
            }
            fn backward(
                &self,
                inputs: &[&Tensor],
                _: &Tensor,
                grad: &Tensor,
                _: &[bool],
            ) -> Result<Vec<Option<Tensor>>> {
                let g = inputs[0].data().iter().zip(grad.data()).map(|(&x, &g)| if x > 0.0 { g } else { 0.0 });
                Ok(vec![Some(Tensor::from_vec(inputs[0].dims(), g.collect(), P)?)])
            }
        }
        let relu_sum = |t: &mut Tape, x: Var| {
            let y = t.value(x).map("relu", |v| v.max(0.0))?;
            let y = t.record(y, &[x], Relu);
            Ok(sum(t, y))
        };
        // both points lie within the default step of the kink at 0
        let at = Tensor::from_vec(&[3], vec![3e-5, -5e-5, 0.7], P).unwrap();
        let r = finite_diff_check(relu_sum, &at, 1e-4).unwrap();
        assert!(r.passed, "{r}");
    }

    #[test]
    fn coordinate_sampling_is_bounded_and_deterministic() {
        let c = Coords::Sample { per_tensor: 5, seed: 3 };
        let a = c.select(100, 1);
        assert_eq!(a.len(), 5);
        assert_eq!(a, c.select(100, 1));
        assert_eq!(c.select(3, 1), vec![0, 1, 2]);
    }
}
