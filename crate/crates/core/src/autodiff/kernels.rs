//! Raw numeric kernels over flat row-major buffers. Shapes are validated by
//! the graph before these are called.

use crate::tensor::Real;

/// `a` is m×k, `b` is k×n.
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + aip * bv;
            }
        }
    }
    out
}

/// aᵀ·b where `a` is k×m and `b` is k×n.
pub fn matmul_tn<T: Real>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == T::zero() {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + api * bv;
            }
        }
    }
    out
}

/// a·bᵀ where `a` is m×k and `b` is n×k.
pub fn matmul_nt<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = dot(arow, brow);
        }
    }
    out
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Reorders a `c0×c1×3` kernel into three tap-major `c0×c1` slabs.
fn taps<T: Real>(kernel: &[T], c0: usize, c1: usize) -> [Vec<T>; 3] {
    let mut out = [
        vec![T::zero(); c0 * c1],
        vec![T::zero(); c0 * c1],
        vec![T::zero(); c0 * c1],
    ];
    for a in 0..c0 {
        for b in 0..c1 {
            for (j, slab) in out.iter_mut().enumerate() {
                slab[a * c1 + b] = kernel[(a * c1 + b) * 3 + j];
            }
        }
    }
    out
}

/// Width-3 cross-correlation with zero padding 1:
/// `out[t,o] = Σ_j Σ_i k[o,i,j] · x[t+j-1,i]`, kernel laid out `co×ci×3`.
pub fn conv_apply<T: Real>(
    x: &[T],
    kernel: &[T],
    batch: usize,
    n: usize,
    ci: usize,
    co: usize,
) -> Vec<T> {
    let slabs = taps(kernel, co, ci);
    let mut out = vec![T::zero(); batch * n * co];
    for b in 0..batch {
        for t in 0..n {
            let orow = &mut out[(b * n + t) * co..(b * n + t + 1) * co];
            for (j, slab) in slabs.iter().enumerate() {
                let src = t as isize + j as isize - 1;
                if src < 0 || src >= n as isize {
                    continue;
                }
                let src = src as usize;
                let xrow = &x[(b * n + src) * ci..(b * n + src + 1) * ci];
                for (o, ov) in orow.iter_mut().enumerate() {
                    *ov = *ov + dot(&slab[o * ci..(o + 1) * ci], xrow);
                }
            }
        }
    }
    out
}

/// Adjoint of [`conv_apply`]: `out[s,i] = Σ_j Σ_o k[o,i,j] · y[s-j+1,o]`.
pub fn conv_adjoint<T: Real>(
    y: &[T],
    kernel: &[T],
    batch: usize,
    n: usize,
    ci: usize,
    co: usize,
) -> Vec<T> {
    let slabs = taps(kernel, co, ci);
    let mut out = vec![T::zero(); batch * n * ci];
    for b in 0..batch {
        for t in 0..n {
            let yrow = &y[(b * n + t) * co..(b * n + t + 1) * co];
            for (j, slab) in slabs.iter().enumerate() {
                let dst = t as isize + j as isize - 1;
                if dst < 0 || dst >= n as isize {
                    continue;
                }
                let dst = dst as usize;
                let orow = &mut out[(b * n + dst) * ci..(b * n + dst + 1) * ci];
                for (o, &yv) in yrow.iter().enumerate() {
                    if yv == T::zero() {
                        continue;
                    }
                    for (ov, &kv) in orow.iter_mut().zip(&slab[o * ci..(o + 1) * ci]) {
                        *ov = *ov + kv * yv;
                    }
                }
            }
        }
    }
    out
}

/// `dk[a,b,j] = Σ_batch Σ_t p[t,a] · q[t+j-1,b]` with `p` having `ca`
/// channels and `q` having `cb` channels; result laid out `ca×cb×3`.
pub fn conv_kernel_grad<T: Real>(
    p: &[T],
    q: &[T],
    batch: usize,
    n: usize,
    ca: usize,
    cb: usize,
) -> Vec<T> {
    let mut slabs = [
        vec![T::zero(); ca * cb],
        vec![T::zero(); ca * cb],
        vec![T::zero(); ca * cb],
    ];
    for b in 0..batch {
        for t in 0..n {
            let prow = &p[(b * n + t) * ca..(b * n + t + 1) * ca];
            for (j, slab) in slabs.iter_mut().enumerate() {
                let src = t as isize + j as isize - 1;
                if src < 0 || src >= n as isize {
                    continue;
                }
                let src = src as usize;
                let qrow = &q[(b * n + src) * cb..(b * n + src + 1) * cb];
                for (a, &pv) in prow.iter().enumerate() {
                    if pv == T::zero() {
                        continue;
                    }
                    for (sv, &qv) in slab[a * cb..(a + 1) * cb].iter_mut().zip(qrow) {
                        *sv = *sv + pv * qv;
                    }
                }
            }
        }
    }
    let mut out = vec![T::zero(); ca * cb * 3];
    for a in 0..ca {
        for b in 0..cb {
            for (j, slab) in slabs.iter().enumerate() {
                out[(a * cb + b) * 3 + j] = slab[a * cb + b];
            }
        }
    }
    out
}

/// Sizes of the dimensions before, at, and after `axis`.
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
