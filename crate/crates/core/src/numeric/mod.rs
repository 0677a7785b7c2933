//! Dense tensors, seeded sampling, and reverse-mode gradients.

mod rng;
mod tape;
mod tensor;

pub use rng::{derive_seed, Rng, Stream};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{affine, matmul, Tensor2};

use crate::error::{Error, Result};

/// Sigmoid-weighted linear unit, `x * sigmoid(x)`.
pub fn silu(x: &Tensor2) -> Tensor2 {
    Activation::Silu.apply(x)
}

/// Hidden-layer nonlinearity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Activation {
    #[default]
    Silu,
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn eval(self, v: f64) -> f64 {
        match self {
            Activation::Silu => v / (1.0 + (-v).exp()),
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
        }
    }

    #[inline]
    pub fn derivative(self, v: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-v).exp());
                s * (1.0 + v * (1.0 - s))
            }
            Activation::Relu => {
                if v > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - v.tanh().powi(2),
        }
    }

    pub fn apply(self, x: &Tensor2) -> Tensor2 {
        x.map(|v| self.eval(v))
    }

    pub fn code(self) -> u8 {
        match self {
            Activation::Silu => 0,
            Activation::Relu => 1,
            Activation::Tanh => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Silu),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Tanh),
            _ => None,
        }
    }
}

/// Feature-wise affine modulation `gamma ⊙ h + beta`.
///
/// `gamma` and `beta` hold either one row (broadcast over the batch) or one
/// row per batch row.
pub fn film(h: &Tensor2, gamma: &Tensor2, beta: &Tensor2) -> Result<Tensor2> {
    if gamma.shape() != beta.shape() {
        return Err(Error::dims(
            "film",
            format!("{:?}", gamma.shape()),
            format!("{:?}", beta.shape()),
        ));
    }
    check_modulation_rows("film", h, gamma)?;
    if gamma.cols() != h.cols() {
        return Err(Error::dims("film", h.cols(), gamma.cols()));
    }
    let per_row = gamma.rows() != 1;
    let mut out = h.clone();
    for r in 0..out.rows() {
        let m = if per_row { r } else { 0 };
        let (g, b) = (gamma.row(m), beta.row(m));
        for ((o, &gv), &bv) in out.row_mut(r).iter_mut().zip(g).zip(b) {
            *o = gv * *o + bv;
        }
    }
    Ok(out)
}

/// Same as [`film`] with `[gamma | beta]` packed into one tensor.
pub(crate) fn film_packed(h: &Tensor2, modulation: &Tensor2) -> Result<Tensor2> {
    check_modulation_rows("film", h, modulation)?;
    let width = h.cols();
    if modulation.cols() != 2 * width {
        return Err(Error::dims("film", 2 * width, modulation.cols()));
    }
    let per_row = modulation.rows() != 1;
    let mut out = h.clone();
    for r in 0..out.rows() {
        let m = modulation.row(if per_row { r } else { 0 });
        let (g, b) = m.split_at(width);
        for ((o, &gv), &bv) in out.row_mut(r).iter_mut().zip(g).zip(b) {
            *o = gv * *o + bv;
        }
    }
    Ok(out)
}

fn check_modulation_rows(op: &'static str, h: &Tensor2, m: &Tensor2) -> Result<()> {
    if m.rows() != 1 && m.rows() != h.rows() {
        return Err(Error::dims(op, format!("1 or {} rows", h.rows()), m.rows()));
    }
    Ok(())
}
