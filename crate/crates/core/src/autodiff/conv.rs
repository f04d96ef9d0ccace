use crate::tensor::{Result, Tensor, TensorError};

struct Dims {
    b: usize,
    ci: usize,
    co: usize,
    t: usize,
    h: usize,
    w: usize,
    kt: usize,
    kh: usize,
    kw: usize,
}

fn dims(x: &[usize], w: &[usize]) -> Result<Dims> {
    let ok = x.len() == 5 && w.len() == 5 && x[1] == w[1] && w[2] % 2 == 1 && w[3] % 2 == 1 && w[4] % 2 == 1;
    if !ok {
        return Err(TensorError::ShapeMismatch {
            op: "conv3d",
            left: x.to_vec(),
            right: w.to_vec(),
        });
    }
    Ok(Dims {
        b: x[0],
        ci: x[1],
        t: x[2],
        h: x[3],
        w: x[4],
        co: w[0],
        kt: w[2],
        kh: w[3],
        kw: w[4],
    })
}

/// Valid output range for a kernel tap at offset `k - pad` along an axis of length `n`.
fn span(k: usize, pad: usize, n: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k);
    let hi = (n + pad).saturating_sub(k).min(n);
    (lo, hi.max(lo))
}

/// Visits every (output element, input element, weight) triple of the
/// convolution, innermost axis contiguous.
fn for_each_tap(d: &Dims, mut f: impl FnMut(usize, usize, usize, usize)) {
    let (pt, ph, pw) = (d.kt / 2, d.kh / 2, d.kw / 2);
    let plane = d.t * d.h * d.w;
    for b in 0..d.b {
        for co in 0..d.co {
            for ci in 0..d.ci {
                for dt in 0..d.kt {
                    let (t0, t1) = span(dt, pt, d.t);
                    if t0 >= t1 {
                        continue;
                    }
                    for dh in 0..d.kh {
                        let (h0, h1) = span(dh, ph, d.h);
                        for dw in 0..d.kw {
                            let (w0, w1) = span(dw, pw, d.w);
                            if w0 >= w1 || h0 >= h1 {
                                continue;
                            }
                            let widx = (((co * d.ci + ci) * d.kt + dt) * d.kh + dh) * d.kw + dw;
                            let out_plane = (b * d.co + co) * plane;
                            let in_plane = (b * d.ci + ci) * plane;
                            if dh == ph && dw == pw {
                                // centre tap: whole (h, w) planes line up, one run over t
                                let o = out_plane + t0 * d.h * d.w;
                                let i = in_plane + (t0 + dt - pt) * d.h * d.w;
                                f(o, i, widx, (t1 - t0) * d.h * d.w);
                                continue;
                            }
                            for t in t0..t1 {
                                let ts = t + dt - pt;
                                for h in h0..h1 {
                                    let hs = h + dh - ph;
                                    let out_base = out_plane + (t * d.h + h) * d.w;
                                    let in_base = in_plane + (ts * d.h + hs) * d.w;
                                    // w index shift: source = w + dw - pw
                                    f(out_base + w0, in_base + w0 + dw - pw, widx, w1 - w0);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv3d_forward(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let d = dims(x.shape(), w.shape())?;
    let mut out = vec![0.0; d.b * d.co * d.t * d.h * d.w];
    let (xd, wd) = (x.data(), w.data());
    for_each_tap(&d, |o, i, k, len| {
        let wv = wd[k];
        for j in 0..len {
            out[o + j] += wv * xd[i + j];
        }
    });
    Tensor::new(&[d.b, d.co, d.t, d.h, d.w], out)
}

pub(crate) fn conv3d_backward(x: &Tensor, w: &Tensor, g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let d = dims(x.shape(), w.shape()).expect("recorded conv3d shapes");
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let (xd, wd) = (x.data(), w.data());
    for_each_tap(&d, |o, i, k, len| {
        let wv = wd[k];
        let mut acc = 0.0;
        for j in 0..len {
            dx[i + j] += wv * g[o + j];
            acc += g[o + j] * xd[i + j];
        }
        dw[k] += acc;
    });
    (dx, dw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct transcription of the zero-padded correlation sum.
    fn conv_oracle(x: &Tensor, w: &Tensor) -> Tensor {
        let (xs, ws) = (x.shape(), w.shape());
        let (b, ci, t, h, wd) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
        let (co, kt, kh, kw) = (ws[0], ws[2], ws[3], ws[4]);
        let mut out = Tensor::zeros(&[b, co, t, h, wd]);
        for bb in 0..b {
            for o in 0..co {
                for tt in 0..t {
                    for hh in 0..h {
                        for ww in 0..wd {
                            let mut s = 0.0;
                            for i in 0..ci {
                                for a in 0..kt {
                                    for c in 0..kh {
                                        for e in 0..kw {
                                            let st = tt as isize + a as isize - (kt / 2) as isize;
                                            let sh = hh as isize + c as isize - (kh / 2) as isize;
                                            let sw = ww as isize + e as isize - (kw / 2) as isize;
                                            if st < 0 || sh < 0 || sw < 0 || st >= t as isize || sh >= h as isize || sw >= wd as isize {
                                                continue;
                                            }
                                            s += x.get(&[bb, i, st as usize, sh as usize, sw as usize]) * w.get(&[o, i, a, c, e]);
                                        }
                                    }
                                }
                            }
                            out.set(&[bb, o, tt, hh, ww], s);
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[2, 3, 4, 3, 5], 1.0, &mut rng);
        let w = Tensor::randn(&[2, 3, 3, 1, 3], 1.0, &mut rng);
        let fast = conv3d_forward(&x, &w).unwrap();
        assert!(fast.max_abs_diff(&conv_oracle(&x, &w)) < 1e-12);
    }

    #[test]
    fn rejects_even_kernels() {
        let x = Tensor::zeros(&[1, 1, 2, 2, 2]);
        let w = Tensor::zeros(&[1, 1, 2, 1, 1]);
        assert!(conv3d_forward(&x, &w).is_err());
    }
}
