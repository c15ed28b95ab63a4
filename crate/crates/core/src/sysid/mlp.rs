//! Small tanh multilayer perceptron trained full-batch.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Deadline;
use crate::error::Result;
use crate::rng;

/// Dense layer, weights stored row-major as `outputs x inputs`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub layers: Vec<Layer>,
}

struct Dense {
    w: DMatrix<f64>,
    b: DVector<f64>,
}

impl Network {
    /// Xavier-uniform weights and zero biases. `sizes` lists every layer width
    /// from input to output.
    pub fn init(sizes: &[usize], seed: u64) -> Self {
        let mut r = rng::rng(seed);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (inputs, outputs) = (w[0], w[1]);
                let limit = (6.0 / (inputs + outputs) as f64).sqrt();
                Layer {
                    inputs,
                    outputs,
                    weights: (0..inputs * outputs)
                        .map(|_| r.gen_range(-limit..limit))
                        .collect(),
                    bias: vec![0.0; outputs],
                }
            })
            .collect();
        Self { layers }
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn set_params(&mut self, p: &[f64]) {
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&p[at..at + nw]);
            at += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&p[at..at + nb]);
            at += nb;
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        let last = self.layers.len() - 1;
        for (li, l) in self.layers.iter().enumerate() {
            let mut z = l.bias.clone();
            for (o, zo) in z.iter_mut().enumerate() {
                let row = &l.weights[o * l.inputs..(o + 1) * l.inputs];
                *zo += row.iter().zip(&a).map(|(w, v)| w * v).sum::<f64>();
            }
            if li != last {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            a = z;
        }
        a
    }

    fn dense(&self) -> Vec<Dense> {
        self.layers
            .iter()
            .map(|l| Dense {
                w: DMatrix::from_row_slice(l.outputs, l.inputs, &l.weights),
                b: DVector::from_column_slice(&l.bias),
            })
            .collect()
    }

    /// Mean squared error over every sample and output, with its gradient in
    /// [`params`](Self::params) order. `x` is `samples x inputs`.
    pub fn loss_and_grad(&self, x: &DMatrix<f64>, y: &DMatrix<f64>) -> (f64, Vec<f64>) {
        let dense = self.dense();
        let (loss, grads) = loss_and_grad_dense(&dense, x, y);
        let flat = grads
            .iter()
            .flat_map(|g| {
                let w: Vec<f64> = (0..g.w.nrows())
                    .flat_map(|i| g.w.row(i).iter().copied().collect::<Vec<_>>())
                    .collect();
                w.into_iter().chain(g.b.iter().copied())
            })
            .collect();
        (loss, flat)
    }

    /// Full-batch Adam on the mean squared error.
    pub fn train(
        &mut self,
        x: &DMatrix<f64>,
        y: &DMatrix<f64>,
        learning_rate: f64,
        epochs: usize,
        deadline: &Deadline,
    ) -> Result<()> {
        const BETA1: f64 = 0.9;
        const BETA2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        let mut dense = self.dense();
        let mut m: Vec<Dense> = dense.iter().map(zeros_like).collect();
        let mut v: Vec<Dense> = dense.iter().map(zeros_like).collect();
        for epoch in 1..=epochs {
            deadline.check()?;
            let (_, grads) = loss_and_grad_dense(&dense, x, y);
            let c1 = 1.0 - BETA1.powi(epoch as i32);
            let c2 = 1.0 - BETA2.powi(epoch as i32);
            for ((p, g), (m, v)) in dense
                .iter_mut()
                .zip(&grads)
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
                    *m = BETA1 * *m + (1.0 - BETA1) * g;
                    *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                    *p -= learning_rate * (*m / c1) / ((*v / c2).sqrt() + EPS);
                };
                for (((p, g), m), v) in
                    p.w.iter_mut()
                        .zip(g.w.iter())
                        .zip(m.w.iter_mut())
                        .zip(v.w.iter_mut())
                {
                    update(p, *g, m, v);
                }
                for (((p, g), m), v) in
                    p.b.iter_mut()
                        .zip(g.b.iter())
                        .zip(m.b.iter_mut())
                        .zip(v.b.iter_mut())
                {
                    update(p, *g, m, v);
                }
            }
        }
        for (l, d) in self.layers.iter_mut().zip(&dense) {
            for o in 0..l.outputs {
                for i in 0..l.inputs {
                    l.weights[o * l.inputs + i] = d.w[(o, i)];
                }
            }
            l.bias.copy_from_slice(d.b.as_slice());
        }
        Ok(())
    }
}

fn zeros_like(d: &Dense) -> Dense {
    Dense {
        w: DMatrix::zeros(d.w.nrows(), d.w.ncols()),
        b: DVector::zeros(d.b.len()),
    }
}

fn loss_and_grad_dense(layers: &[Dense], x: &DMatrix<f64>, y: &DMatrix<f64>) -> (f64, Vec<Dense>) {
    let last = layers.len() - 1;
    let mut acts = vec![x.clone()];
    for (li, l) in layers.iter().enumerate() {
        let mut z = acts.last().expect("non-empty") * l.w.transpose();
        for (j, mut col) in z.column_iter_mut().enumerate() {
            col.add_scalar_mut(l.b[j]);
        }
        if li != last {
            z.apply(|v| *v = v.tanh());
        }
        acts.push(z);
    }
    let diff = acts.last().expect("non-empty") - y;
    let count = (diff.nrows() * diff.ncols()) as f64;
    let loss = diff.norm_squared() / count;
    let mut delta = diff * (2.0 / count);
    let mut grads: Vec<Dense> = Vec::with_capacity(layers.len());
    for li in (0..layers.len()).rev() {
        let a_prev = &acts[li];
        let gw = delta.transpose() * a_prev;
        let gb = DVector::from_iterator(delta.ncols(), delta.column_iter().map(|c| c.sum()));
        grads.push(Dense { w: gw, b: gb });
        if li > 0 {
            let mut d_prev = &delta * &layers[li].w;
            d_prev.zip_apply(a_prev, |d, a| *d *= 1.0 - a * a);
            delta = d_prev;
        }
    }
    grads.reverse();
    (loss, grads)
}
