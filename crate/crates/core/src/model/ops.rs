//! Row-major forward/backward kernels. Activations are `[T, C]` slices,
//! weights `[out, in]`; backward passes accumulate into their gradient
//! buffers.

pub const LN_EPS: f64 = 1e-5;

/// Dot product with four independent accumulators so the loop vectorizes.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in chunks * 4..a.len() {
        tail += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out[t] = w · inp[t] + b`
pub fn linear_forward(
    out: &mut [f64],
    inp: &[f64],
    w: &[f64],
    b: Option<&[f64]>,
    cin: usize,
    cout: usize,
) {
    let rows = inp.len() / cin;
    debug_assert_eq!(out.len(), rows * cout);
    debug_assert_eq!(w.len(), cin * cout);
    for t in 0..rows {
        let x = &inp[t * cin..(t + 1) * cin];
        let y = &mut out[t * cout..(t + 1) * cout];
        for (o, yo) in y.iter_mut().enumerate() {
            *yo = dot(x, &w[o * cin..(o + 1) * cin]) + b.map_or(0.0, |b| b[o]);
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    dinp: Option<&mut [f64]>,
    dw: &mut [f64],
    db: Option<&mut [f64]>,
    dout: &[f64],
    inp: &[f64],
    w: &[f64],
    cin: usize,
    cout: usize,
) {
    let rows = inp.len() / cin;
    if let Some(dinp) = dinp {
        for t in 0..rows {
            let g = &dout[t * cout..(t + 1) * cout];
            let dx = &mut dinp[t * cin..(t + 1) * cin];
            for (o, &go) in g.iter().enumerate() {
                if go != 0.0 {
                    axpy(dx, go, &w[o * cin..(o + 1) * cin]);
                }
            }
        }
    }
    for t in 0..rows {
        let x = &inp[t * cin..(t + 1) * cin];
        let g = &dout[t * cout..(t + 1) * cout];
        for (o, &go) in g.iter().enumerate() {
            if go != 0.0 {
                axpy(&mut dw[o * cin..(o + 1) * cin], go, x);
            }
        }
    }
    if let Some(db) = db {
        for t in 0..rows {
            for (d, g) in db.iter_mut().zip(&dout[t * cout..(t + 1) * cout]) {
                *d += g;
            }
        }
    }
}

/// Normalizes each row; returns per-row mean and reciprocal std via the out slices.
pub fn layernorm_forward(
    out: &mut [f64],
    mean: &mut [f64],
    rstd: &mut [f64],
    inp: &[f64],
    gain: &[f64],
    bias: &[f64],
    c: usize,
) {
    for t in 0..inp.len() / c {
        let x = &inp[t * c..(t + 1) * c];
        let m = x.iter().sum::<f64>() / c as f64;
        let var = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / c as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        let y = &mut out[t * c..(t + 1) * c];
        for i in 0..c {
            y[i] = (x[i] - m) * r * gain[i] + bias[i];
        }
        mean[t] = m;
        rstd[t] = r;
    }
}

#[allow(clippy::too_many_arguments)]
pub fn layernorm_backward(
    dinp: &mut [f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
    dout: &[f64],
    inp: &[f64],
    gain: &[f64],
    mean: &[f64],
    rstd: &[f64],
    c: usize,
) {
    for t in 0..inp.len() / c {
        let x = &inp[t * c..(t + 1) * c];
        let g = &dout[t * c..(t + 1) * c];
        let (m, r) = (mean[t], rstd[t]);
        let mut sum_dn = 0.0;
        let mut sum_dn_n = 0.0;
        for i in 0..c {
            let n = (x[i] - m) * r;
            let dn = gain[i] * g[i];
            sum_dn += dn;
            sum_dn_n += dn * n;
        }
        let (mean_dn, mean_dn_n) = (sum_dn / c as f64, sum_dn_n / c as f64);
        let dx = &mut dinp[t * c..(t + 1) * c];
        for i in 0..c {
            let n = (x[i] - m) * r;
            dbias[i] += g[i];
            dgain[i] += n * g[i];
            dx[i] += (gain[i] * g[i] - mean_dn - n * mean_dn_n) * r;
        }
    }
}

const GELU_SCALE: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// tanh-approximated GELU
pub fn gelu_forward(out: &mut [f64], inp: &[f64]) {
    for (y, &x) in out.iter_mut().zip(inp) {
        let cube = 0.044715 * x * x * x;
        *y = 0.5 * x * (1.0 + (GELU_SCALE * (x + cube)).tanh());
    }
}

pub fn gelu_backward(dinp: &mut [f64], inp: &[f64], dout: &[f64]) {
    for ((d, &x), &g) in dinp.iter_mut().zip(inp).zip(dout) {
        let cube = 0.044715 * x * x * x;
        let arg = GELU_SCALE * (x + cube);
        let th = arg.tanh();
        let sech2 = 1.0 - th * th;
        let local =
            0.5 * (1.0 + th) + 0.5 * x * sech2 * GELU_SCALE * (1.0 + 3.0 * 0.044715 * x * x);
        *d += local * g;
    }
}

/// Causal multi-head attention over `qkv` rows laid out `[q | k | v]`.
/// `att` receives the `[H, T, T]` probabilities (upper triangle zero).
pub fn attention_forward(
    out: &mut [f64],
    att: &mut [f64],
    qkv: &[f64],
    t_len: usize,
    c: usize,
    heads: usize,
) {
    let hd = c / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let c3 = 3 * c;
    for h in 0..heads {
        for t in 0..t_len {
            let q = &qkv[t * c3 + h * hd..t * c3 + (h + 1) * hd];
            let row = &mut att[(h * t_len + t) * t_len..(h * t_len + t + 1) * t_len];
            let mut max = f64::NEG_INFINITY;
            for s in 0..=t {
                let k = &qkv[s * c3 + c + h * hd..s * c3 + c + (h + 1) * hd];
                row[s] = dot(q, k) * scale;
                max = max.max(row[s]);
            }
            let mut sum = 0.0;
            for p in row.iter_mut().take(t + 1) {
                *p = (*p - max).exp();
                sum += *p;
            }
            for p in row.iter_mut().take(t + 1) {
                *p /= sum;
            }
            for p in row.iter_mut().skip(t + 1) {
                *p = 0.0;
            }
            let y = &mut out[t * c + h * hd..t * c + (h + 1) * hd];
            y.fill(0.0);
            for s in 0..=t {
                let v = &qkv[s * c3 + 2 * c + h * hd..s * c3 + 2 * c + (h + 1) * hd];
                axpy(y, row[s], v);
            }
        }
    }
}

pub fn attention_backward(
    dqkv: &mut [f64],
    dout: &[f64],
    qkv: &[f64],
    att: &[f64],
    t_len: usize,
    c: usize,
    heads: usize,
) {
    let hd = c / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let c3 = 3 * c;
    let mut dp = vec![0.0; t_len];
    for h in 0..heads {
        for t in 0..t_len {
            let row = &att[(h * t_len + t) * t_len..(h * t_len + t + 1) * t_len];
            let g = &dout[t * c + h * hd..t * c + (h + 1) * hd];
            for s in 0..=t {
                let v_off = s * c3 + 2 * c + h * hd;
                dp[s] = dot(g, &qkv[v_off..v_off + hd]);
                axpy(&mut dqkv[v_off..v_off + hd], row[s], g);
            }
            let weighted: f64 = (0..=t).map(|s| row[s] * dp[s]).sum();
            for s in 0..=t {
                let ds = row[s] * (dp[s] - weighted) * scale;
                if ds == 0.0 {
                    continue;
                }
                let q_off = t * c3 + h * hd;
                let k_off = s * c3 + c + h * hd;
                for i in 0..hd {
                    dqkv[q_off + i] += ds * qkv[k_off + i];
                    dqkv[k_off + i] += ds * qkv[q_off + i];
                }
            }
        }
    }
}

/// Numerically stable softmax into `out`; `-inf` logits get zero mass.
pub fn softmax(out: &mut [f64], logits: &[f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = if l == f64::NEG_INFINITY {
            0.0
        } else {
            (l - max).exp()
        };
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Cross-entropy of one row against `target`; writes `softmax - onehot`
/// scaled by `scale` into `dlogits` and returns the loss.
pub fn cross_entropy(
    dlogits: Option<&mut [f64]>,
    logits: &[f64],
    target: usize,
    scale: f64,
) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
    let log_z = max + sum.ln();
    if let Some(d) = dlogits {
        for (i, (di, &l)) in d.iter_mut().zip(logits).enumerate() {
            let p = (l - log_z).exp();
            *di += scale * (p - if i == target { 1.0 } else { 0.0 });
        }
    }
    log_z - logits[target]
}

/// Sinusoidal position table `[len, d]`.
pub fn sinusoidal_table(len: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; len * d];
    for pos in 0..len {
        for i in (0..d).step_by(2) {
            let freq = (10_000f64).powf(-(i as f64) / d as f64);
            let angle = pos as f64 * freq;
            pe[pos * d + i] = angle.sin();
            if i + 1 < d {
                pe[pos * d + i + 1] = angle.cos();
            }
        }
    }
    pe
}
