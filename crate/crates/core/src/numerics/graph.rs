use super::{Real, Tensor};
use crate::error::{Error, Result};
use crate::par::Mode;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Local backward rule of a recorded operation.
///
/// `needs[i]` tells whether input `i` wants a gradient; rules may return
/// `None` for inputs that do not.
pub trait BackwardOp<F: Real>: Send + Sync {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor<F>],
        output: &Tensor<F>,
        grad: &Tensor<F>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<F>>>>;
}

struct Node<F: Real> {
    value: Tensor<F>,
    inputs: Vec<Var>,
    op: Option<Box<dyn BackwardOp<F>>>,
    requires_grad: bool,
}

/// Reverse-mode tape. Operations are recorded in call order and replayed
/// backwards by [`Graph::backward`].
pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
    check_finite: bool,
    consumed: bool,
    mode: Mode,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients<F: Real> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            check_finite: false,
            consumed: false,
            mode: Mode::Sequential,
        }
    }

    /// Execution mode for ops with independent inner work (e.g. the two
    /// directions of a bidirectional LSTM).
    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Scan every op output for NaN/Inf and fail with the op name.
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            op: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an op whose forward value was computed by the caller.
    pub fn record(
        &mut self,
        inputs: &[Var],
        value: Tensor<F>,
        op: Box<dyn BackwardOp<F>>,
    ) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            inputs: inputs.to_vec(),
            op: if requires_grad { Some(op) } else { None },
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Back-propagates from a scalar `loss`. May be called once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<F>> {
        if self.consumed {
            return Err(Error::Backward("graph already consumed by a backward pass".into()));
        }
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                lv.shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Backward("loss is detached from every parameter".into()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), F::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(op) = node.op.as_ref() else { continue };
            let Some(g) = grads[idx].take() else { continue };
            let inputs: Vec<&Tensor<F>> =
                node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let local = op.backward(&inputs, &node.value, &g, &needs)?;
            if local.len() != node.inputs.len() {
                return Err(Error::Backward(format!(
                    "{} returned {} gradients for {} inputs",
                    op.name(),
                    local.len(),
                    node.inputs.len()
                )));
            }
            for ((input, gi), need) in node.inputs.iter().zip(local).zip(needs) {
                let Some(gi) = gi else { continue };
                if !need {
                    continue;
                }
                if gi.shape() != self.nodes[input.0].value.shape() {
                    return Err(Error::Backward(format!(
                        "{} produced gradient of shape {:?} for input of shape {:?}",
                        op.name(),
                        gi.shape(),
                        self.nodes[input.0].value.shape()
                    )));
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&gi),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        // Leaves with requires_grad that never received a gradient get zeros.
        for (i, node) in self.nodes.iter().enumerate() {
            if node.op.is_none() && node.requires_grad && grads[i].is_none() && i <= loss.0 {
                grads[i] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_x_gives_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_vec(vec![1.0, -2.0, 3.0]));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn sum_of_squares_gives_two_x() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_vec(vec![1.0, -2.0, 3.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn second_backward_is_an_error() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_vec(vec![1.0]));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Backward(_))));
    }

    #[test]
    fn non_scalar_and_detached_losses_are_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(g.backward(x).is_err());

        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let s = g.sum(c).unwrap();
        assert!(g.backward(s).is_err());
    }

    #[test]
    fn unused_parameter_gets_zero_grad() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        let y = g.param(Tensor::from_vec(vec![5.0]));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(y).unwrap().data(), &[0.0]);
    }

    #[test]
    fn finite_checks_name_the_op() {
        let mut g = Graph::<f64>::new().with_finite_checks(true);
        let x = g.param(Tensor::from_vec(vec![f64::MAX, f64::MAX]));
        let err = g.add(x, x).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "add" }));
    }
}
