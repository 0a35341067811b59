//! Dense f64 kernels shared by the autograd graph and the inference path.
//!
//! Every output element of a product is accumulated from zero in ascending
//! inner-index order, whatever blocking path computes it. That keeps one row
//! of `A·B` bitwise identical whether it is computed alone or inside a large
//! batch, which the incremental decoder relies on.

const MR: usize = 8;
const NR: usize = 16;
/// Row blocks per cache block of packed `A`.
const MC_BLOCKS: usize = 16;

/// `C[m×n] = A[m×k] · B[k×n]`, row-major.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    matmul_into(a, b, &mut c, m, k, n);
    c
}

/// Overwrites `c` with `A·B`.
pub fn matmul_into(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    // B packed as column panels of NR, inner index major: [panel][p][q].
    let panels = n / NR;
    let mut bpack = vec![0.0; panels * k * NR];
    for jp in 0..panels {
        let dst = &mut bpack[jp * k * NR..(jp + 1) * k * NR];
        for p in 0..k {
            dst[p * NR..(p + 1) * NR].copy_from_slice(&b[p * n + jp * NR..p * n + (jp + 1) * NR]);
        }
    }
    // A packed as row blocks of MR, inner index major: [block][p][r].
    let full = m / MR;
    let mut apack = vec![0.0; MC_BLOCKS.min(full) * MR * k];
    let mut blk0 = 0;
    while blk0 < full {
        let nb = MC_BLOCKS.min(full - blk0);
        for bi in 0..nb {
            let dst = &mut apack[bi * MR * k..(bi + 1) * MR * k];
            for r in 0..MR {
                let row = (blk0 + bi) * MR + r;
                for (p, &v) in a[row * k..(row + 1) * k].iter().enumerate() {
                    dst[p * MR + r] = v;
                }
            }
        }
        for jp in 0..panels {
            let panel = &bpack[jp * k * NR..(jp + 1) * k * NR];
            for bi in 0..nb {
                let acc = block_kernel(&apack[bi * MR * k..(bi + 1) * MR * k], panel, k);
                for (r, row) in acc.iter().enumerate() {
                    let off = ((blk0 + bi) * MR + r) * n + jp * NR;
                    c[off..off + NR].copy_from_slice(row);
                }
            }
        }
        blk0 += nb;
    }
    for i in full * MR..m {
        let arow = &a[i * k..(i + 1) * k];
        for jp in 0..panels {
            let panel = &bpack[jp * k * NR..(jp + 1) * k * NR];
            let mut acc = [0.0f64; NR];
            for (&av, bv) in arow.iter().zip(panel.chunks_exact(NR)) {
                for q in 0..NR {
                    acc[q] = av.mul_add(bv[q], acc[q]);
                }
            }
            c[i * n + jp * NR..i * n + (jp + 1) * NR].copy_from_slice(&acc);
        }
    }
    let j = panels * NR;
    if j < n {
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for col in j..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc = arow[p].mul_add(b[p * n + col], acc);
                }
                c[i * n + col] = acc;
            }
        }
    }
}

#[inline(always)]
fn block_kernel(apack: &[f64], panel: &[f64], k: usize) -> [[f64; NR]; MR] {
    let mut acc = [[0.0f64; NR]; MR];
    for (av, bv) in apack.chunks_exact(MR).zip(panel.chunks_exact(NR)).take(k) {
        let av: &[f64; MR] = av.try_into().unwrap();
        let bv: &[f64; NR] = bv.try_into().unwrap();
        for r in 0..MR {
            for q in 0..NR {
                acc[r][q] = av[r].mul_add(bv[q], acc[r][q]);
            }
        }
    }
    acc
}

/// Row-major transpose of an `m×n` matrix.
pub fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut t = vec![0.0; m * n];
    const B: usize = 32;
    for i0 in (0..m).step_by(B) {
        for j0 in (0..n).step_by(B) {
            for i in i0..(i0 + B).min(m) {
                for j in j0..(j0 + B).min(n) {
                    t[j * m + i] = a[i * n + j];
                }
            }
        }
    }
    t
}

/// `C[m×n] = A[m×k] · B[n×k]ᵀ`.
pub fn matmul_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let bt = transpose(b, n, k);
    matmul(a, &bt, m, k, n)
}

/// `C[k×n] = A[m×k]ᵀ · B[m×n]`.
pub fn matmul_at(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let at = transpose(a, m, k);
    matmul(&at, b, k, m, n)
}

/// Numerically stable softmax of one row, in place.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Log-softmax of one row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

pub const RMS_EPS: f64 = 1e-6;

/// Per-row inverse RMS, `1 / sqrt(mean(x²) + eps)`.
pub fn inv_rms_row(x: &[f64]) -> f64 {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    1.0 / (ms + RMS_EPS).sqrt()
}

/// Row-wise RMS normalisation with a learned gain.
pub fn rms_norm(x: &[f64], gain: &[f64], rows: usize) -> Vec<f64> {
    let d = gain.len();
    debug_assert_eq!(x.len(), rows * d);
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let s = inv_rms_row(xr);
        for ((o, &v), &g) in out[r * d..(r + 1) * d].iter_mut().zip(xr).zip(gain) {
            *o = v * s * g;
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + tanh(GELU_C * (x + 0.044715 * x * x * x)))
}

/// `tanh` via a single `exp`.
#[inline]
fn tanh(u: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let t = tanh(GELU_C * (x + 0.044715 * x * x * x));
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// GELU value and derivative sharing one `tanh`.
#[inline]
pub fn gelu_with_grad(x: f64) -> (f64, f64) {
    let t = tanh(GELU_C * (x + 0.044715 * x * x * x));
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    (0.5 * x * (1.0 + t), 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
}

/// Rotary position embedding applied in place to one head vector at `pos`.
/// `inverse` applies the transpose rotation (used for gradients).
pub fn rotate_half_pairs(v: &mut [f64], pos: usize, inverse: bool) {
    let hd = v.len();
    let half = hd / 2;
    for i in 0..half {
        let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / hd as f64);
        let angle = pos as f64 * freq;
        let (s, c) = angle.sin_cos();
        let s = if inverse { -s } else { s };
        let (x0, x1) = (v[i], v[i + half]);
        v[i] = x0 * c - x1 * s;
        v[i + half] = x0 * s + x1 * c;
    }
}

/// Causal attention for one query row against `keys`/`values` rows `0..=t`,
/// for a single head. Writes the attention weights into `probs` (len t+1)
/// and the output into `out`.
/// Dot product with eight interleaved accumulators.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] = x[i].mul_add(y[i], acc[i]);
        }
    }
    for (x, y) in ra.iter().zip(rb) {
        acc[0] = x.mul_add(*y, acc[0]);
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]))
}

/// `y += a·x`.
#[inline]
pub fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi = a.mul_add(*xi, *yi);
    }
}

pub fn attend_row(
    q: &[f64],
    keys: &[f64],
    values: &[f64],
    stride: usize,
    len: usize,
    scale: f64,
    probs: &mut [f64],
    out: &mut [f64],
) {
    let hd = q.len();
    for s in 0..len {
        probs[s] = dot(q, &keys[s * stride..s * stride + hd]) * scale;
    }
    softmax_in_place(&mut probs[..len]);
    out.iter_mut().for_each(|o| *o = 0.0);
    for s in 0..len {
        axpy(out, probs[s], &values[s * stride..s * stride + hd]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s = a[i * k + p].mul_add(b[p * n + j], s);
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn blocked_matches_naive_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(m, k, n) in &[(1, 1, 1), (5, 7, 17), (9, 33, 40), (4, 16, 16), (13, 3, 35)] {
            let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            assert_eq!(matmul(&a, &b, m, k, n), naive(&a, &b, m, k, n));
        }
    }

    #[test]
    fn single_row_equals_batched_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (m, k, n) = (11, 24, 37);
        let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let full = matmul(&a, &b, m, k, n);
        for i in 0..m {
            let row = matmul(&a[i * k..(i + 1) * k], &b, 1, k, n);
            assert_eq!(&full[i * n..(i + 1) * n], &row[..]);
        }
    }

    #[test]
    fn transposed_variants() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.0, 1.0, 0.0, 1.0, 1.0]; // 2x3
        assert_eq!(matmul_bt(&a, &b, 2, 3, 2), vec![4.0, 5.0, 10.0, 11.0]);
        assert_eq!(matmul_at(&a, &b, 2, 3, 3), vec![1.0, 4.0, 5.0, 2.0, 5.0, 7.0, 3.0, 6.0, 9.0]);
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
