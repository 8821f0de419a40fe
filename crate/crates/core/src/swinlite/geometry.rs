//! Index tables for windowing, cyclic shifts, merging and expanding token grids.

use crate::microtensor::Tensor;

/// Additive attention penalty for token pairs that wrapped around during a
/// cyclic shift.
pub const SHIFT_MASK_PENALTY: f64 = -1e9;

#[derive(Debug, Clone)]
pub struct WindowLayout {
    pub grid: usize,
    pub window: usize,
    pub shift: usize,
    /// `order[k]` is the token feeding window-major position `k`.
    pub order: Vec<usize>,
    /// Inverse of `order`.
    pub inverse: Vec<usize>,
    /// `[n_windows, w², w²]` penalty mask, present only when shifting.
    pub mask: Option<Vec<f64>>,
}

impl WindowLayout {
    pub fn new(grid: usize, window: usize, shift: usize) -> Self {
        let per_side = grid / window;
        let mut order = Vec::with_capacity(grid * grid);
        for wr in 0..per_side {
            for wc in 0..per_side {
                for ty in 0..window {
                    for tx in 0..window {
                        let r = (wr * window + ty + shift) % grid;
                        let c = (wc * window + tx + shift) % grid;
                        order.push(r * grid + c);
                    }
                }
            }
        }
        let mut inverse = vec![0; order.len()];
        for (k, &t) in order.iter().enumerate() {
            inverse[t] = k;
        }
        let mask = (shift > 0).then(|| shift_mask(grid, window, shift));
        Self { grid, window, shift, order, inverse, mask }
    }

    pub fn n_windows(&self) -> usize {
        (self.grid / self.window).pow(2)
    }

    pub fn area(&self) -> usize {
        self.window * self.window
    }

    /// Repeats the mask per head in `[n_windows, heads, w², w²]` order.
    pub fn mask_tensor(&self, heads: usize) -> Option<Tensor> {
        let m = self.mask.as_ref()?;
        let a2 = self.area() * self.area();
        let mut data = Vec::with_capacity(m.len() * heads);
        for w in 0..self.n_windows() {
            for _ in 0..heads {
                data.extend_from_slice(&m[w * a2..(w + 1) * a2]);
            }
        }
        Some(Tensor::new(vec![self.n_windows(), heads, self.area(), self.area()], data).expect("mask shape"))
    }
}

/// Region labels in the shifted frame: the standard three-band split per
/// axis; pairs with different labels must not attend.
fn shift_mask(grid: usize, window: usize, shift: usize) -> Vec<f64> {
    let band = |i: usize| {
        if i < grid - window {
            0
        } else if i < grid - shift {
            1
        } else {
            2
        }
    };
    let per_side = grid / window;
    let area = window * window;
    let mut mask = Vec::with_capacity(per_side * per_side * area * area);
    for wr in 0..per_side {
        for wc in 0..per_side {
            let labels: Vec<usize> = (0..area)
                .map(|t| {
                    let (y, x) = (wr * window + t / window, wc * window + t % window);
                    band(y) * 3 + band(x)
                })
                .collect();
            for i in 0..area {
                for j in 0..area {
                    mask.push(if labels[i] == labels[j] { 0.0 } else { SHIFT_MASK_PENALTY });
                }
            }
        }
    }
    mask
}

/// For each query/key pair in a window, the row of the `(2w-1)²` bias table.
pub fn relative_position_index(window: usize) -> Vec<usize> {
    let area = window * window;
    let span = 2 * window - 1;
    let mut idx = Vec::with_capacity(area * area);
    for i in 0..area {
        for j in 0..area {
            let dy = (i / window) as isize - (j / window) as isize + window as isize - 1;
            let dx = (i % window) as isize - (j % window) as isize + window as isize - 1;
            idx.push(dy as usize * span + dx as usize);
        }
    }
    idx
}

/// Source tokens for 2×2 merging: four consecutive entries per merged token,
/// ordered (2r,2c), (2r+1,2c), (2r,2c+1), (2r+1,2c+1).
pub fn merge_order(grid: usize) -> Vec<usize> {
    let half = grid / 2;
    let mut order = Vec::with_capacity(grid * grid);
    for r in 0..half {
        for c in 0..half {
            for (dy, dx) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                order.push((2 * r + dy) * grid + 2 * c + dx);
            }
        }
    }
    order
}

/// After a token of a `grid`-side map is split into four sub-tokens laid out
/// as `[token, 4]`, the sub-token feeding each cell of the doubled grid.
pub fn expand_order(grid: usize) -> Vec<usize> {
    let big = grid * 2;
    let mut order = Vec::with_capacity(big * big);
    for r in 0..big {
        for c in 0..big {
            let token = (r / 2) * grid + c / 2;
            let sub = (r % 2) * 2 + c % 2;
            order.push(token * 4 + sub);
        }
    }
    order
}

/// Offsets `order` for every image of a batch of `batch` stacked maps.
pub fn batched(order: &[usize], batch: usize) -> Vec<usize> {
    let n = order.len();
    (0..batch).flat_map(|b| order.iter().map(move |&i| b * n + i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unshifted_layout_groups_windows() {
        let l = WindowLayout::new(4, 2, 0);
        assert_eq!(&l.order[..4], &[0, 1, 4, 5]);
        assert_eq!(&l.order[4..8], &[2, 3, 6, 7]);
        assert!(l.mask.is_none());
        for (k, &t) in l.order.iter().enumerate() {
            assert_eq!(l.inverse[t], k);
        }
    }

    #[test]
    fn shifted_mask_blocks_wrapped_pairs_only() {
        let l = WindowLayout::new(4, 2, 1);
        let m = l.mask.as_ref().unwrap();
        // First window lies entirely inside the unwrapped region.
        assert!(m[..16].iter().all(|&v| v == 0.0));
        // Last window mixes all four bands: only the diagonal is open.
        let last = &m[3 * 16..];
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(last[i * 4 + j] == 0.0, i == j);
            }
        }
    }

    #[test]
    fn relative_index_is_symmetric_about_centre() {
        let idx = relative_position_index(3);
        assert_eq!(idx.len(), 81);
        assert!(idx.iter().all(|&i| i < 25));
        // Diagonal pairs share the zero offset.
        for i in 0..9 {
            assert_eq!(idx[i * 9 + i], 12);
        }
    }

    #[test]
    fn expand_inverts_merge_layout() {
        assert_eq!(merge_order(2), vec![0, 2, 1, 3]);
        assert_eq!(expand_order(1), vec![0, 1, 2, 3]);
        let e = expand_order(2);
        assert_eq!(&e[..4], &[0, 1, 4, 5]);
    }
}
