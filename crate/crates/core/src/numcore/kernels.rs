//! Matmul kernels. The parallel kernel distributes output rows across
//! threads; every output element is still accumulated by the same
//! sequential inner loop, so results are bit-identical to the sequential
//! kernel for any thread count.

use crate::par;

/// c[m,n] += a[m,k] @ b[k,n], sequential.
pub fn matmul_seq(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (c_v, &b_v) in c_row.iter_mut().zip(b_row) {
                *c_v += a_ip * b_v;
            }
        }
    }
}

/// c[m,n] += a[m,k] @ b[k,n], rows split across threads.
#[cfg(feature = "parallel")]
pub fn matmul_par(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    par::for_each_row(c, n, |i, c_row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (c_v, &b_v) in c_row.iter_mut().zip(b_row) {
                *c_v += a_ip * b_v;
            }
        }
    });
}

/// Dispatching matmul: parallel above [`par::PAR_FLOP_THRESHOLD`]
/// multiply-accumulates when the `parallel` feature is enabled.
pub fn matmul_view(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    #[cfg(feature = "parallel")]
    {
        if m * k * n >= par::PAR_FLOP_THRESHOLD && m > 1 {
            matmul_par(a, b, c, m, k, n);
            return;
        }
    }
    matmul_seq(a, b, c, m, k, n);
}

/// c[m,n] += a[k,m]ᵀ @ b[k,n] (i.e. aᵀb without materializing aᵀ).
pub fn matmul_at_b(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // Row i of c gathers column i of a; loop order keeps b and c accesses
    // contiguous. Accumulation order over p is fixed, so this is
    // deterministic too.
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let a_pi = a[p * m + i];
            let b_row = &b[p * n..(p + 1) * n];
            for (c_v, &b_v) in c_row.iter_mut().zip(b_row) {
                *c_v += a_pi * b_v;
            }
        }
    }
}

/// c[m,n] += a[m,k] @ b[n,k]ᵀ.
pub fn matmul_a_bt(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (j, c_v) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = 0.0f32;
            for (&a_v, &b_v) in a_row.iter().zip(b_row) {
                s += a_v * b_v;
            }
            *c_v += s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seq_matches_hand_example() {
        // [1 2; 3 4] @ [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        matmul_seq(&a, &b, &mut c, 2, 2, 2);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn par_bitwise_matches_seq() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let (m, k, n) = (33, 17, 29);
        let a: Vec<f32> = (0..m * k).map(|_| rng.random::<f32>() - 0.5).collect();
        let b: Vec<f32> = (0..k * n).map(|_| rng.random::<f32>() - 0.5).collect();
        let mut c0 = vec![0.0; m * n];
        let mut c1 = vec![0.0; m * n];
        matmul_seq(&a, &b, &mut c0, m, k, n);
        matmul_par(&a, &b, &mut c1, m, k, n);
        assert_eq!(c0, c1);
    }

    #[test]
    fn transposed_variants_match_plain() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.5, -1.0, 2.0, 0.0, 1.5]; // 3x2
        let mut c = [0.0; 4];
        matmul_seq(&a, &b, &mut c, 2, 3, 2);

        // aᵀ stored as a: a_t (3x2) — use matmul_at_b with a_t interpreted as [k=3? ...]
        let a_t = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0]; // 3x2 = aᵀ
        let mut c2 = [0.0; 4];
        matmul_at_b(&a_t, &b, &mut c2, 2, 3, 2);
        assert_eq!(c, c2);

        let b_t = [1.0, -1.0, 0.0, 0.5, 2.0, 1.5]; // 2x3 = bᵀ
        let mut c3 = [0.0; 4];
        matmul_a_bt(&a, &b_t, &mut c3, 2, 3, 2);
        assert_eq!(c, c3);
    }
}
