use super::Tensor;
use crate::error::{shape_err, Result};

/// Weights of a single LSTM cell with gate order (input, forget, cell, output).
#[derive(Clone, Copy, Debug)]
pub struct LstmWeights<'g> {
    /// `[4k, d]`
    pub w_ih: Tensor<'g>,
    /// `[4k, k]`
    pub w_hh: Tensor<'g>,
    /// `[4k]`
    pub bias: Tensor<'g>,
}

impl LstmWeights<'_> {
    pub fn hidden(&self) -> usize {
        self.w_hh.shape()[1]
    }
}

/// One step of the standard LSTM cell:
///
/// ```text
/// i = σ(W_i x + U_i h + b_i)    f = σ(W_f x + U_f h + b_f)
/// g = tanh(W_g x + U_g h + b_g) o = σ(W_o x + U_o h + b_o)
/// c' = f ⊙ c + i ⊙ g            h' = o ⊙ tanh(c')
/// ```
pub fn lstm_step<'g>(
    x: &Tensor<'g>,
    h_prev: &Tensor<'g>,
    c_prev: &Tensor<'g>,
    p: &LstmWeights<'g>,
) -> Result<(Tensor<'g>, Tensor<'g>)> {
    let k = p.hidden();
    let (wih, whh) = (p.w_ih.shape(), p.w_hh.shape());
    if wih.len() != 2 || wih[0] != 4 * k || whh != [4 * k, k] || p.bias.shape() != [4 * k] {
        return Err(shape_err(
            "lstm_step",
            format!(
                "w_ih {wih:?}, w_hh {whh:?}, bias {:?} for hidden {k}",
                p.bias.shape()
            ),
        ));
    }
    if h_prev.shape() != [k] || c_prev.shape() != [k] {
        return Err(shape_err(
            "lstm_step",
            format!(
                "state shapes {:?}/{:?}, expected [{k}]",
                h_prev.shape(),
                c_prev.shape()
            ),
        ));
    }
    let gates = x
        .linear(&p.w_ih, Some(&p.bias))?
        .add(&h_prev.linear(&p.w_hh, None)?)?;
    let i = gates.slice(0, k)?.sigmoid();
    let f = gates.slice(k, k)?.sigmoid();
    let g = gates.slice(2 * k, k)?.tanh();
    let o = gates.slice(3 * k, k)?.sigmoid();
    let c = f.mul(c_prev)?.add(&i.mul(&g)?)?;
    let h = o.mul(&c.tanh())?;
    Ok((h, c))
}
