use super::{Tape, Var};
use crate::tensor::{Result, TensorError};

/// Scaled dot-product attention `softmax(Q Kᵀ / √d) V`.
///
/// Accepts rank-2 operands (`[L_q, d]`, `[L_k, d]`, `[L_k, d_v]`) or batched
/// rank-3 operands with a shared leading group axis.
pub fn attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
    let rank = tape.shape(q).len();
    if rank == 2 {
        let (sq, sk, sv) = (tape.shape(q).to_vec(), tape.shape(k).to_vec(), tape.shape(v).to_vec());
        if sk.len() != 2 || sv.len() != 2 {
            return Err(mismatch(&sq, &sk));
        }
        let q3 = tape.reshape(q, &[1, sq[0], sq[1]])?;
        let k3 = tape.reshape(k, &[1, sk[0], sk[1]])?;
        let v3 = tape.reshape(v, &[1, sv[0], sv[1]])?;
        let out = attention(tape, q3, k3, v3)?;
        return tape.reshape(out, &[sq[0], sv[1]]);
    }
    let (sq, sk, sv) = (tape.shape(q).to_vec(), tape.shape(k).to_vec(), tape.shape(v).to_vec());
    if sq.len() != 3 || sk.len() != 3 || sv.len() != 3 {
        return Err(mismatch(&sq, &sk));
    }
    if sq[2] != sk[2] || sq[0] != sk[0] {
        return Err(mismatch(&sq, &sk));
    }
    if sk[1] != sv[1] || sk[0] != sv[0] {
        return Err(mismatch(&sk, &sv));
    }
    let kt = tape.transpose_last(k)?;
    let scores = tape.bmm(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (sq[2] as f64).sqrt())?;
    let weights = tape.softmax(scores, 2)?;
    tape.bmm(weights, v)
}

/// `heads` independent attentions over equal feature slices, concatenated.
/// Operands are batched rank-3 (`[G, L, d]`).
pub fn multi_head_attention(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    if heads <= 1 {
        return attention(tape, q, k, v);
    }
    let (sq, sk, sv) = (tape.shape(q).to_vec(), tape.shape(k).to_vec(), tape.shape(v).to_vec());
    if sq.len() != 3 || sk.len() != 3 || sv.len() != 3 || sq[2] % heads != 0 || sv[2] % heads != 0 {
        return Err(TensorError::InvalidArgument {
            op: "multi_head_attention",
            msg: format!("widths {} / {} not divisible by {heads} heads", sq[2], sv[2]),
        });
    }
    let split = |tape: &mut Tape, x: Var, s: &[usize]| -> Result<Var> {
        let x = tape.reshape(x, &[s[0], s[1], heads, s[2] / heads])?;
        let x = tape.permute(x, &[0, 2, 1, 3])?;
        tape.reshape(x, &[s[0] * heads, s[1], s[2] / heads])
    };
    let qh = split(tape, q, &sq)?;
    let kh = split(tape, k, &sk)?;
    let vh = split(tape, v, &sv)?;
    let out = attention(tape, qh, kh, vh)?;
    let out = tape.reshape(out, &[sq[0], heads, sq[1], sv[2] / heads])?;
    let out = tape.permute(out, &[0, 2, 1, 3])?;
    tape.reshape(out, &[sq[0], sq[1], sv[2]])
}

fn mismatch(a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op: "attention",
        left: a.to_vec(),
        right: b.to_vec(),
    }
}
