//! Reverse-mode differentiation over a linear tape of tensor operations.
//!
//! Only the operations the denoiser needs are recorded. Every node keeps its
//! forward value; `backward` walks the tape once in reverse.

use super::tensor::{gemm, Tensor2};
use super::{film_packed, Activation};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Var },
    Act { x: Var, kind: Activation },
    /// `modulation` packs `[gamma | beta]` column-wise; 1 or `h.rows` rows.
    Film { h: Var, modulation: Var },
    RowScale { x: Var, scales: Vec<f64> },
    Scale { x: Var, c: f64 },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor2,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by tape position; `None` for nodes that do not
/// depend on any parameter.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor2>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor2> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor2> {
        self.grads.get_mut(v.0).and_then(Option::take)
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

    pub fn value(&self, v: Var) -> &Tensor2 {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor2, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor2) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor2) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// `x · w + b`; `b` is a 1×n row.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let bias = self.value(b);
        if bias.rows() != 1 {
            return Err(Error::dims("Tape::affine", "bias with 1 row", bias.rows()));
        }
        let y = super::affine(self.value(x), self.value(w), bias.data())?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(y, Op::Affine { x, w, b }, rg))
    }

    pub fn activate(&mut self, x: Var, kind: Activation) -> Var {
        let y = kind.apply(self.value(x));
        let rg = self.rg(x);
        self.push(y, Op::Act { x, kind }, rg)
    }

    pub fn film(&mut self, h: Var, modulation: Var) -> Result<Var> {
        let y = film_packed(self.value(h), self.value(modulation))?;
        let rg = self.rg(h) || self.rg(modulation);
        Ok(self.push(y, Op::Film { h, modulation }, rg))
    }

    pub fn row_scale(&mut self, x: Var, scales: &[f64]) -> Result<Var> {
        let y = self.value(x).scale_rows(scales)?;
        let rg = self.rg(x);
        Ok(self.push(
            y,
            Op::RowScale {
                x,
                scales: scales.to_vec(),
            },
            rg,
        ))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let y = self.value(x).scale(c);
        let rg = self.rg(x);
        self.push(y, Op::Scale { x, c }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p * q)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Mul { a, b }, rg))
    }

    /// Propagates `seed_grad` (the gradient of some scalar with respect to
    /// `output`) back through the tape.
    pub fn backward(&self, output: Var, seed_grad: &Tensor2) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        self.value(output)
            .expect_same_shape("Tape::backward", seed_grad)?;

        let mut grads: Vec<Option<Tensor2>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed_grad.clone());

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::Affine { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    if self.rg(*x) {
                        let mut dx = Tensor2::zeros(xv.rows(), xv.cols());
                        gemm(1.0, &g, false, wv, true, 0.0, &mut dx)?;
                        accumulate(&mut grads, *x, dx)?;
                    }
                    if self.rg(*w) {
                        let mut dw = Tensor2::zeros(wv.rows(), wv.cols());
                        gemm(1.0, xv, true, &g, false, 0.0, &mut dw)?;
                        accumulate(&mut grads, *w, dw)?;
                    }
                    if self.rg(*b) {
                        let db = Tensor2::row_vector(&g.col_sums());
                        accumulate(&mut grads, *b, db)?;
                    }
                }
                Op::Act { x, kind } => {
                    let xv = self.value(*x);
                    let dx = xv.zip_map(&g, |v, gv| gv * kind.derivative(v))?;
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Film { h, modulation } => {
                    let hv = self.value(*h);
                    let mv = self.value(*modulation);
                    let width = hv.cols();
                    let per_row = mv.rows() != 1;
                    if self.rg(*h) {
                        let mut dh = g.clone();
                        for r in 0..dh.rows() {
                            let gamma = &mv.row(if per_row { r } else { 0 })[..width];
                            for (d, &gm) in dh.row_mut(r).iter_mut().zip(gamma) {
                                *d *= gm;
                            }
                        }
                        accumulate(&mut grads, *h, dh)?;
                    }
                    if self.rg(*modulation) {
                        let mut dm = Tensor2::zeros(mv.rows(), mv.cols());
                        for r in 0..g.rows() {
                            let target = if per_row { r } else { 0 };
                            let grow = g.row(r);
                            let hrow = hv.row(r);
                            let drow = dm.row_mut(target);
                            for c in 0..width {
                                drow[c] += grow[c] * hrow[c];
                                drow[width + c] += grow[c];
                            }
                        }
                        accumulate(&mut grads, *modulation, dm)?;
                    }
                }
                Op::RowScale { x, scales } => {
                    let dx = g.scale_rows(scales)?;
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Scale { x, c } => {
                    accumulate(&mut grads, *x, g.scale(*c))?;
                }
                Op::Add { a, b } => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g.clone())?;
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g)?;
                    }
                }
                Op::Mul { a, b } => {
                    if self.rg(*a) {
                        let da = g.zip_map(self.value(*b), |p, q| p * q)?;
                        accumulate(&mut grads, *a, da)?;
                    }
                    if self.rg(*b) {
                        let db = g.zip_map(self.value(*a), |p, q| p * q)?;
                        accumulate(&mut grads, *b, db)?;
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor2>], v: Var, g: Tensor2) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.add_scaled_assign(1.0, &g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}
