use serde::{Deserialize, Serialize};

use super::Scalar;

/// Convolution border policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// No padding; each k×k pass loses `k - 1` pixels per axis.
    Valid,
    /// Zero padding that preserves the spatial extent. Even kernels pad one
    /// extra pixel after (bottom/right).
    #[default]
    Same,
}

impl Padding {
    /// Zero pixels added before and after each axis for a `k`-wide kernel.
    pub fn amounts(self, k: usize) -> (usize, usize) {
        match self {
            Padding::Valid => (0, 0),
            Padding::Same => {
                let before = (k - 1) / 2;
                (before, k - 1 - before)
            }
        }
    }
}

/// Output extent of a stride-1 convolution, or `None` when the kernel does not fit.
pub fn conv_output_len(len: usize, k: usize, padding: Padding) -> Option<usize> {
    let (p0, p1) = padding.amounts(k);
    (len + p0 + p1).checked_sub(k).map(|v| v + 1)
}

/// Unfolds `x [C,H,W]` into a `(C·k·k) × (Ho·Wo)` matrix.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let p = ho * wo;
    let mut cols = vec![T::ZERO; c * k * k * p];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = oy + ki;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    let src_row = &plane[(iy - pad) * w..(iy - pad + 1) * w];
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = ox + kj;
                        if ix >= pad && ix - pad < w {
                            *o = src_row[ix - pad];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters-adds column gradients back onto `dx`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im<T: Scalar>(
    cols: &[T],
    dx: &mut [T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    let p = ho * wo;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = oy + ki;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    let dst_row = &mut plane[(iy - pad) * w..(iy - pad + 1) * w];
                    for ox in 0..wo {
                        let ix = ox + kj;
                        if ix >= pad && ix - pad < w {
                            dst_row[ix - pad] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}
