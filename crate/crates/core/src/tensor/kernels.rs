// Raw slice kernels shared by the forward and backward passes.

/// c[m×n] += a[m×k] · b[k×n]
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// c[m×k] += a[m×n] · b[k×n]ᵀ
pub(crate) fn matmul_a_bt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            c[i * k + j] += s;
        }
    }
}

/// c[k×n] += a[m×k]ᵀ · b[m×n]
pub(crate) fn matmul_at_b_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Max-shifted softmax of one row. Entries where `allowed` is false get
/// exactly zero and take no part in the normalisation.
pub fn softmax_row(x: &[f64], allowed: Option<&[bool]>, out: &mut [f64]) {
    let ok = |j: usize| allowed.is_none_or(|a| a[j]);
    let mut max = f64::NEG_INFINITY;
    for (j, &v) in x.iter().enumerate() {
        if ok(j) && v > max {
            max = v;
        }
    }
    let mut sum = 0.0;
    for (j, (o, &v)) in out.iter_mut().zip(x).enumerate() {
        if ok(j) {
            *o = (v - max).exp();
            sum += *o;
        } else {
            *o = 0.0;
        }
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Numerically stable log-softmax of one row.
pub fn log_softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
