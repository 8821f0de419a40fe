//! Raw loops behind the primitives.

#[derive(Debug, Clone)]
pub(crate) struct MatDims {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// Whether the right operand is shared across the batch.
    pub shared_rhs: bool,
    pub out_shape: Vec<usize>,
}

/// Supported forms: `[m,k]x[k,n]`, `[B,m,k]x[B,k,n]`, `[B,m,k]x[k,n]`.
pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Option<MatDims> {
    match (a.len(), b.len()) {
        (2, 2) if a[1] == b[0] => {
            Some(MatDims { batch: 1, m: a[0], k: a[1], n: b[1], shared_rhs: true, out_shape: vec![a[0], b[1]] })
        }
        (3, 3) if a[0] == b[0] && a[2] == b[1] => Some(MatDims {
            batch: a[0],
            m: a[1],
            k: a[2],
            n: b[2],
            shared_rhs: false,
            out_shape: vec![a[0], a[1], b[2]],
        }),
        (3, 2) if a[2] == b[0] => Some(MatDims {
            batch: a[0],
            m: a[1],
            k: a[2],
            n: b[1],
            shared_rhs: true,
            out_shape: vec![a[0], a[1], b[1]],
        }),
        _ => None,
    }
}

pub(crate) fn matmul_forward(a: &[f64], b: &[f64], out: &mut [f64], d: &MatDims) {
    let (m, k, n) = (d.m, d.k, d.n);
    for bi in 0..d.batch {
        let a = &a[bi * m * k..(bi + 1) * m * k];
        let b = if d.shared_rhs { &b[..k * n] } else { &b[bi * k * n..(bi + 1) * k * n] };
        let c = &mut out[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            let crow = &mut c[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (cv, bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    }
}

/// `ga += g · bᵀ`
pub(crate) fn matmul_grad_a(g: &[f64], b: &[f64], ga: &mut [f64], d: &MatDims) {
    let (m, k, n) = (d.m, d.k, d.n);
    for bi in 0..d.batch {
        let g = &g[bi * m * n..(bi + 1) * m * n];
        let b = if d.shared_rhs { &b[..k * n] } else { &b[bi * k * n..(bi + 1) * k * n] };
        let ga = &mut ga[bi * m * k..(bi + 1) * m * k];
        for i in 0..m {
            let grow = &g[i * n..(i + 1) * n];
            for p in 0..k {
                let brow = &b[p * n..(p + 1) * n];
                ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
            }
        }
    }
}

/// `gb += aᵀ · g`, summed over the batch when the right operand is shared.
pub(crate) fn matmul_grad_b(a: &[f64], g: &[f64], gb: &mut [f64], d: &MatDims) {
    let (m, k, n) = (d.m, d.k, d.n);
    for bi in 0..d.batch {
        let a = &a[bi * m * k..(bi + 1) * m * k];
        let g = &g[bi * m * n..(bi + 1) * m * n];
        let gb = if d.shared_rhs { &mut gb[..k * n] } else { &mut gb[bi * k * n..(bi + 1) * k * n] };
        for i in 0..m {
            let grow = &g[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                for (gv, x) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                    *gv += av * x;
                }
            }
        }
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For every output position of the permuted tensor, the flat source index.
fn permute_sources(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let step: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let numel: usize = shape.iter().product();
    let mut src = Vec::with_capacity(numel);
    let mut counter = vec![0usize; out_shape.len()];
    let mut offset = 0usize;
    for _ in 0..numel {
        src.push(offset);
        for ax in (0..out_shape.len()).rev() {
            counter[ax] += 1;
            offset += step[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            offset -= step[ax] * out_shape[ax];
            counter[ax] = 0;
        }
    }
    (out_shape, src)
}

pub(crate) fn permute(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let (out_shape, src) = permute_sources(shape, axes);
    (out_shape, src.iter().map(|&i| data[i]).collect())
}

pub(crate) fn permute_accumulate_back(g: &[f64], in_shape: &[usize], axes: &[usize], ga: &mut [f64]) {
    let (_, src) = permute_sources(in_shape, axes);
    for (gi, &i) in g.iter().zip(&src) {
        ga[i] += gi;
    }
}

/// `(outer, len, inner)` extents around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_transposes_matrix() {
        let (shape, data) = permute(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3], &[1, 0]);
        assert_eq!(shape, vec![3, 2]);
        assert_eq!(data, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn gelu_matches_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_191_990_608_276_8).abs() < 1e-12);
    }
}
