use super::tape::{Tape, Var};
use super::tensor::Real;
use crate::error::{Error, Result};

/// Weights of one LSTM cell bound on a tape. Gate order in the stacked
/// weights is input, forget, cell, output.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    /// `[4h, input]`
    pub w_ih: Var,
    /// `[4h, h]`
    pub w_hh: Var,
    /// `[4h]`
    pub bias: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

/// One step of the standard LSTM recurrence on a batch `x[N, input]`.
pub fn lstm_cell<T: Real>(tape: &mut Tape<T>, w: &LstmVars, x: Var, state: LstmState) -> Result<LstmState> {
    let [n, hidden] = tape.value(state.h).dims2("lstm_cell")?;
    if tape.value(state.c).shape() != [n, hidden] {
        return Err(Error::shape(
            "lstm_cell",
            format!("h {:?} vs c {:?}", tape.value(state.h).shape(), tape.value(state.c).shape()),
        ));
    }
    if tape.value(w.w_hh).shape() != [4 * hidden, hidden] {
        return Err(Error::shape(
            "lstm_cell",
            format!("recurrent weight {:?} for hidden size {}", tape.value(w.w_hh).shape(), hidden),
        ));
    }
    let xi = tape.linear(x, w.w_ih, Some(w.bias))?;
    let hh = tape.linear(state.h, w.w_hh, None)?;
    let pre = tape.add(xi, hh)?;
    let i = tape.slice_cols(pre, 0, hidden)?;
    let f = tape.slice_cols(pre, hidden, hidden)?;
    let g = tape.slice_cols(pre, 2 * hidden, hidden)?;
    let o = tape.slice_cols(pre, 3 * hidden, hidden)?;
    let i = tape.sigmoid(i)?;
    let f = tape.sigmoid(f)?;
    let g = tape.tanh(g)?;
    let o = tape.sigmoid(o)?;
    let fc = tape.mul(f, state.c)?;
    let ig = tape.mul(i, g)?;
    let c = tape.add(fc, ig)?;
    let tc = tape.tanh(c)?;
    let h = tape.mul(o, tc)?;
    Ok(LstmState { h, c })
}
