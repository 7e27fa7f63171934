use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Bound, Graph, NodeId, Unary};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
    Softplus,
}

impl Activation {
    pub fn apply<T: Scalar>(self, g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Tanh => g.unary(x, Unary::Tanh),
            Activation::Relu => g.unary(x, Unary::Relu),
            Activation::Softplus => g.unary(x, Unary::Softplus),
        }
    }
}

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn uniform_init<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::lit(rng.random_range(-bound..=bound)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

/// Fully connected layer `y = act(x W + b)` with `W: in × out`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), uniform_init(&[input, output], input, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[output]));
        Self {
            weight,
            bias,
            input,
            output,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound<'_, T>,
        x: NodeId,
        act: Activation,
    ) -> Result<NodeId> {
        let cols = g.value(x).cols();
        if cols != self.input {
            return Err(Error::ShapeMismatch {
                op: "linear",
                left: g.value(x).shape().to_vec(),
                right: vec![self.input, self.output],
            });
        }
        let w = g.param(p, self.weight);
        let b = g.param(p, self.bias);
        let y = g.affine(x, w, b)?;
        act.apply(g, y)
    }

    pub fn num_params(&self) -> usize {
        self.output * (self.input + 1)
    }
}

/// LSTM cell with gates packed as `[input | forget | candidate | output]`.
#[derive(Clone, Copy, Debug)]
pub struct LstmCell {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub input_size: usize,
    pub hidden_size: usize,
}

impl LstmCell {
    /// Uniform weights, zero biases except `+1` on the forget gate.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        input_size: usize,
        hidden_size: usize,
        rng: &mut R,
    ) -> Self {
        let h = hidden_size;
        let fan_in = input_size + hidden_size;
        let w_input = store.add(format!("{name}.w_input"), uniform_init(&[input_size, 4 * h], fan_in, rng));
        let w_hidden = store.add(format!("{name}.w_hidden"), uniform_init(&[h, 4 * h], fan_in, rng));
        let mut b = Tensor::zeros(&[4 * h]);
        for v in &mut b.data_mut()[h..2 * h] {
            *v = T::one();
        }
        let bias = store.add(format!("{name}.bias"), b);
        Self {
            w_input,
            w_hidden,
            bias,
            input_size,
            hidden_size,
        }
    }

    pub fn num_params(&self) -> usize {
        4 * self.hidden_size * (self.input_size + self.hidden_size + 1)
    }

    /// One recurrence step; returns `(h, c)`.
    pub fn step<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound<'_, T>,
        x: NodeId,
        h_prev: NodeId,
        c_prev: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let hs = self.hidden_size;
        for (node, want, what) in [
            (x, self.input_size, "lstm input"),
            (h_prev, hs, "lstm hidden"),
            (c_prev, hs, "lstm cell"),
        ] {
            if g.value(node).cols() != want {
                return Err(Error::InvalidShape(format!(
                    "{what}: expected {want} columns, got shape {:?}",
                    g.value(node).shape()
                )));
            }
        }
        let wx = g.param(p, self.w_input);
        let wh = g.param(p, self.w_hidden);
        let b = g.param(p, self.bias);
        let xw = g.matmul(x, wx)?;
        let hw = g.matmul(h_prev, wh)?;
        let pre = g.add(xw, hw)?;
        let pre = g.add_bias(pre, b)?;

        let i_pre = g.slice_cols(pre, 0, hs)?;
        let f_pre = g.slice_cols(pre, hs, hs)?;
        let g_pre = g.slice_cols(pre, 2 * hs, hs)?;
        let o_pre = g.slice_cols(pre, 3 * hs, hs)?;
        let i = g.sigmoid(i_pre)?;
        let f = g.sigmoid(f_pre)?;
        let cand = g.tanh(g_pre)?;
        let o = g.sigmoid(o_pre)?;

        let keep = g.mul(f, c_prev)?;
        let write = g.mul(i, cand)?;
        let c = g.add(keep, write)?;
        let c_sq = g.tanh(c)?;
        let h = g.mul(o, c_sq)?;
        Ok((h, c))
    }
}
