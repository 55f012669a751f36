//! Numerical self-checks: a central finite-difference gradient harness and
//! a naive loop-based reference implementation of the encoder forward pass.
//! Tests compare the fast production paths against these.

use crate::data::TokenBatch;
use crate::encoder::{AttentionKind, EncoderWeights, LN_EPS};
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Central-difference step size.
pub const FD_STEP: f64 = 1e-5;
/// Floor applied to the relative-error denominator.
pub const FD_DENOM_FLOOR: f64 = 1e-8;
/// Denominator floor for deep-composite checks. Rebuilding a full model
/// loss (magnitude up to ~40 when the detection term is weighted) leaves
/// float-cancellation noise of ~1e-9 in the difference quotient, so entries
/// below this scale are judged absolutely: an absolute error must exceed
/// 1e-8 (10x the noise) before the 1e-4 relative tolerance trips.
pub const FD_DEEP_FLOOR: f64 = 1e-4;

/// Worst entry found by [`finite_difference_check`].
#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    pub max_rel: f64,
    pub leaf: usize,
    pub entry: usize,
    pub fd: f64,
    pub analytic: f64,
}

/// Central finite-difference check of every leaf entry against the
/// backpropagated gradient. `build` must construct the same scalar loss on
/// every call (no hidden randomness). Reports the maximum relative error
/// `|fd - g| / max(|fd|, |g|, 1e-8)` over all entries.
pub fn finite_difference_check<F>(leaves: &[Tensor<f64>], build: F) -> Result<FdReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    fd_check_impl(leaves, FD_DENOM_FLOOR, false, build)
}

/// Finite-difference check tuned for deep composites (full model losses).
/// Two effects make the plain quotient too blunt there. Near layer
/// normalization of tiny-variance rows (std-0.02 init makes the first LN
/// input variance comparable to its epsilon) third derivatives reach ~1e8,
/// so the h^2 truncation term of a single central difference is visible;
/// Richardson extrapolation over steps h and h/2 cancels it. And many true
/// gradient entries sit below the float-cancellation noise of re-evaluating
/// the loss, so the relative-error denominator is floored at
/// [`FD_DEEP_FLOOR`].
pub fn finite_difference_check_deep<F>(leaves: &[Tensor<f64>], build: F) -> Result<FdReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    fd_check_impl(leaves, FD_DEEP_FLOOR, true, build)
}

fn fd_check_impl<F>(
    leaves: &[Tensor<f64>],
    floor: f64,
    richardson: bool,
    build: F,
) -> Result<FdReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let grads: Vec<Tensor<f64>> = vars
        .iter()
        .zip(leaves)
        .map(|(&v, t)| g.take_grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    drop(g);

    let eval = |current: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = current.iter().map(|t| g.constant(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut work: Vec<Tensor<f64>> = leaves.to_vec();
    let mut report = FdReport {
        max_rel: 0.0,
        leaf: 0,
        entry: 0,
        fd: 0.0,
        analytic: 0.0,
    };
    for li in 0..work.len() {
        for e in 0..work[li].numel() {
            let orig = work[li].data()[e];
            let mut central = |h: f64| -> Result<f64> {
                work[li].data_mut()[e] = orig + h;
                let lp = eval(&work)?;
                work[li].data_mut()[e] = orig - h;
                let lm = eval(&work)?;
                work[li].data_mut()[e] = orig;
                Ok((lp - lm) / (2.0 * h))
            };
            let fd = if richardson {
                let full = central(FD_STEP)?;
                let half = central(FD_STEP / 2.0)?;
                (4.0 * half - full) / 3.0
            } else {
                central(FD_STEP)?
            };
            let a = grads[li].data()[e];
            let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(floor);
            if rel > report.max_rel {
                report = FdReport {
                    max_rel: rel,
                    leaf: li,
                    entry: e,
                    fd,
                    analytic: a,
                };
            }
        }
    }
    Ok(report)
}

/// Random test tensors with entries uniform in [-2, 2].
pub fn random_leaves(shapes: &[&[usize]], rng: &mut Rng) -> Vec<Tensor<f64>> {
    shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            let data: Vec<f64> = (0..n).map(|_| rng.uniform(-2.0, 2.0)).collect();
            Tensor::new(s.to_vec(), data).expect("shape/data agree")
        })
        .collect()
}

fn ln_row(row: &mut [f64], gamma: &[f64], beta: &[f64]) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    for (i, x) in row.iter_mut().enumerate() {
        *x = (*x - mean) * inv * gamma[i] + beta[i];
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `rows x [in] @ [in, out] + [out]`, entry by entry.
fn linear_rows(xs: &[Vec<f64>], w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<Vec<f64>> {
    let (ins, outs) = (w.shape()[0], w.shape()[1]);
    let wd = w.data();
    let bd = b.data();
    xs.iter()
        .map(|row| {
            assert_eq!(row.len(), ins);
            (0..outs)
                .map(|o| bd[o] + (0..ins).map(|i| row[i] * wd[i * outs + o]).sum::<f64>())
                .collect()
        })
        .collect()
}

/// Reference encoder forward pass: plain nested loops, one attention pair
/// (i, j) at a time, no batched kernels or gather tricks. Matches
/// [`crate::encoder::encoder_forward`] with dropout 0 up to float
/// reassociation. Intended for small shapes only.
pub fn encoder_forward_reference(
    store: &ParamStore<f64>,
    w: &EncoderWeights,
    batch: &TokenBatch,
) -> Result<Tensor<f64>> {
    batch.validate()?;
    let d = &w.dims;
    let (bsz, l) = (batch.batch, batch.seq_len);
    let (h, heads, dh) = (d.hidden, d.heads, d.head_dim());
    let e = d.emb_dim;
    let get = |id: ParamId| store.get(id);

    // Embedding block.
    let tok = get(w.token_emb).data();
    let seg = get(w.segment_emb).data();
    let pos = w.pos_emb.map(|id| get(id).data());
    let mut emb_rows: Vec<Vec<f64>> = Vec::with_capacity(bsz * l);
    for r in 0..bsz * l {
        let id = batch.ids[r];
        let sg = batch.segment_ids[r] as usize;
        let t = r % l;
        let mut row = vec![0.0; e];
        for c in 0..e {
            row[c] = tok[id * e + c] + seg[sg * e + c];
            if let Some(p) = pos {
                row[c] += p[t * e + c];
            }
        }
        emb_rows.push(row);
    }
    let mut x = linear_rows(&emb_rows, get(w.emb_proj_w), get(w.emb_proj_b));
    let ln_g = get(w.emb_ln_g).data();
    let ln_b = get(w.emb_ln_b).data();
    for row in &mut x {
        ln_row(row, ln_g, ln_b);
    }

    let disentangled = d.attention == AttentionKind::Disentangled;
    let scale = if disentangled {
        1.0 / ((3 * dh) as f64).sqrt()
    } else {
        1.0 / (dh as f64).sqrt()
    };
    let k = d.k;
    let two_k = 2 * k;
    let rel_rows: Vec<Vec<f64>> = match w.rel_table {
        Some(id) => get(id).rows(d.rel_dim).map(|r| r.to_vec()).collect(),
        None => Vec::new(),
    };

    for layer in &w.layers {
        let qc = linear_rows(&x, get(layer.q_w), get(layer.q_b));
        let kc = linear_rows(&x, get(layer.k_w), get(layer.k_b));
        let vc = linear_rows(&x, get(layer.v_w), get(layer.v_b));
        let (kr, qr) = match &layer.pos {
            Some(p) => (
                linear_rows(&rel_rows, get(p.k_w), get(p.k_b)),
                linear_rows(&rel_rows, get(p.q_w), get(p.q_b)),
            ),
            None => (Vec::new(), Vec::new()),
        };
        let mut attn = vec![vec![0.0; h]; bsz * l];
        for b in 0..bsz {
            let len = batch.lens[b];
            for hh in 0..heads {
                let lo = hh * dh;
                let hi = lo + dh;
                for i in 0..l {
                    let qrow = &qc[b * l + i][lo..hi];
                    let mut scores = vec![0.0; len];
                    for (j, s) in scores.iter_mut().enumerate() {
                        let krow = &kc[b * l + j][lo..hi];
                        let mut v = dot(qrow, krow);
                        if disentangled {
                            let dc2p = crate::encoder::relative_distance(i, j, k);
                            let dp2c = crate::encoder::relative_distance(j, i, k);
                            debug_assert!(dc2p < two_k && dp2c < two_k);
                            v += dot(qrow, &kr[dc2p][lo..hi]);
                            v += dot(krow, &qr[dp2c][lo..hi]);
                        }
                        *s = v * scale;
                    }
                    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - m).exp();
                        total += *s;
                    }
                    for s in scores.iter_mut() {
                        *s /= total;
                    }
                    for dd in 0..dh {
                        let mut acc = 0.0;
                        for (j, &p) in scores.iter().enumerate() {
                            acc += p * vc[b * l + j][lo + dd];
                        }
                        attn[b * l + i][lo + dd] = acc;
                    }
                }
            }
        }
        let proj = linear_rows(&attn, get(layer.o_w), get(layer.o_b));
        let g1 = get(layer.ln1_g).data();
        let b1 = get(layer.ln1_b).data();
        for (row, p) in x.iter_mut().zip(&proj) {
            for (a, b) in row.iter_mut().zip(p) {
                *a += b;
            }
            ln_row(row, g1, b1);
        }
        let mut f = linear_rows(&x, get(layer.ffn1_w), get(layer.ffn1_b));
        for row in &mut f {
            for v in row.iter_mut() {
                *v = gelu(*v);
            }
        }
        let f = linear_rows(&f, get(layer.ffn2_w), get(layer.ffn2_b));
        let g2 = get(layer.ln2_g).data();
        let b2 = get(layer.ln2_b).data();
        for (row, p) in x.iter_mut().zip(&f) {
            for (a, b) in row.iter_mut().zip(p) {
                *a += b;
            }
            ln_row(row, g2, b2);
        }
    }
    let mut data = Vec::with_capacity(bsz * l * h);
    for row in &x {
        data.extend_from_slice(row);
    }
    Tensor::new(vec![bsz, l, h], data)
}
