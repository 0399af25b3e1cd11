// Derivative stencils as explicit tap lists, shared by the forward operators
// and by their adjoints in the autoencoder backward pass.

use std::ops::Deref;

/// Up to nine `(dx, dy, coefficient)` taps.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Taps {
    len: usize,
    taps: [(isize, isize, f64); 9],
}

impl Taps {
    fn new(list: &[(isize, isize, f64)]) -> Self {
        let mut taps = [(0, 0, 0.0); 9];
        taps[..list.len()].copy_from_slice(list);
        Self {
            len: list.len(),
            taps,
        }
    }
}

impl Deref for Taps {
    type Target = [(isize, isize, f64)];

    fn deref(&self) -> &Self::Target {
        &self.taps[..self.len]
    }
}

/// First-derivative taps along an axis of length `n >= 2` at index `i`.
#[inline]
pub(crate) fn d1_taps(i: usize, n: usize) -> [(isize, f64); 2] {
    if i == 0 {
        [(0, -1.0), (1, 1.0)]
    } else if i == n - 1 {
        [(-1, -1.0), (0, 1.0)]
    } else {
        [(-1, -0.5), (1, 0.5)]
    }
}

/// Taps of `dx + dy` at `(x, y)`.
#[inline]
pub(crate) fn grad1_taps(x: usize, y: usize, w: usize, h: usize) -> Taps {
    let tx = d1_taps(x, w);
    let ty = d1_taps(y, h);
    Taps::new(&[
        (tx[0].0, 0, tx[0].1),
        (tx[1].0, 0, tx[1].1),
        (0, ty[0].0, ty[0].1),
        (0, ty[1].0, ty[1].1),
    ])
}

/// Taps of `dxx + 2 dxy + dyy` at `(x, y)`; empty on the border.
#[inline]
pub(crate) fn grad2_taps(x: usize, y: usize, w: usize, h: usize) -> Taps {
    if x == 0 || y == 0 || x + 1 >= w || y + 1 >= h {
        return Taps::new(&[]);
    }
    Taps::new(&[
        (0, 0, -4.0),
        (-1, 0, 1.0),
        (1, 0, 1.0),
        (0, -1, 1.0),
        (0, 1, 1.0),
        (1, 1, 0.5),
        (-1, -1, 0.5),
        (1, -1, -0.5),
        (-1, 1, -0.5),
    ])
}

/// Applies a stencil to one `w x h` plane.
pub(crate) fn apply_plane(
    plane: &[f64],
    w: usize,
    h: usize,
    taps: fn(usize, usize, usize, usize) -> Taps,
    out: &mut [f64],
) {
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = taps(x, y, w, h)
                .iter()
                .map(|&(dx, dy, k)| {
                    k * plane[super::offset(y, dy) * w + super::offset(x, dx)]
                })
                .sum();
        }
    }
}

/// Adds the adjoint of the stencil applied to `grad_out` into `grad_in`.
pub(crate) fn adjoint_plane(
    grad_out: &[f64],
    w: usize,
    h: usize,
    taps: fn(usize, usize, usize, usize) -> Taps,
    grad_in: &mut [f64],
) {
    for y in 0..h {
        for x in 0..w {
            let g = grad_out[y * w + x];
            if g == 0.0 {
                continue;
            }
            for &(dx, dy, k) in taps(x, y, w, h).iter() {
                grad_in[super::offset(y, dy) * w + super::offset(x, dx)] += k * g;
            }
        }
    }
}
