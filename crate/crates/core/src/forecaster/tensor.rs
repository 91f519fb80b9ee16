use crate::error::{Error, Result};

/// Latent grid of `h × w` patches with `e` features each, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchTensor {
    pub h: usize,
    pub w: usize,
    pub e: usize,
    pub data: Vec<f64>,
}

impl PatchTensor {
    pub fn zeros(h: usize, w: usize, e: usize) -> Self {
        PatchTensor {
            h,
            w,
            e,
            data: vec![0.0; h * w * e],
        }
    }

    pub fn from_vec(h: usize, w: usize, e: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w * e {
            return Err(Error::Mismatch(format!(
                "{} values for a {h}x{w}x{e} patch tensor",
                data.len()
            )));
        }
        Ok(PatchTensor { h, w, e, data })
    }

    #[inline]
    pub fn token(&self, i: usize, j: usize) -> &[f64] {
        let o = (i * self.w + j) * self.e;
        &self.data[o..o + self.e]
    }

    #[inline]
    pub fn token_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let o = (i * self.w + j) * self.e;
        &mut self.data[o..o + self.e]
    }

    /// Copy of the `rows × cols` block starting at `(r0, c0)`, no wrapping.
    pub fn block(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> PatchTensor {
        let mut out = PatchTensor::zeros(rows, cols, self.e);
        for i in 0..rows {
            for j in 0..cols {
                out.token_mut(i, j)
                    .copy_from_slice(self.token(r0 + i, c0 + j));
            }
        }
        out
    }

    pub fn set_block(&mut self, r0: usize, c0: usize, src: &PatchTensor) {
        for i in 0..src.h {
            for j in 0..src.w {
                self.token_mut(r0 + i, c0 + j)
                    .copy_from_slice(src.token(i, j));
            }
        }
    }
}

/// Reduces a signed shift to `[0, n)` after checking `|s| < n`.
pub(crate) fn wrap_shift(s: i64, n: usize) -> Option<usize> {
    let n_i = n as i64;
    if s.abs() >= n_i {
        return None;
    }
    Some(s.rem_euclid(n_i) as usize)
}

/// Circular roll: the token at `(i, j)` moves to `(i + s_h, j + s_w)` modulo
/// the grid. Latitude wraps in index only; attention masks keep the seam
/// from mixing.
pub fn cyclic_shift(t: &PatchTensor, shift: (i64, i64)) -> Result<PatchTensor> {
    let (s_h, s_w) = shift;
    let (Some(dh), Some(dw)) = (wrap_shift(s_h, t.h), wrap_shift(s_w, t.w)) else {
        return Err(Error::ShiftOutOfRange {
            s_h,
            s_w,
            h: t.h,
            w: t.w,
        });
    };
    if dh == 0 && dw == 0 {
        return Ok(t.clone());
    }
    let mut out = PatchTensor::zeros(t.h, t.w, t.e);
    for i in 0..t.h {
        let oi = (i + dh) % t.h;
        for j in 0..t.w {
            let oj = (j + dw) % t.w;
            out.token_mut(oi, oj).copy_from_slice(t.token(i, j));
        }
    }
    Ok(out)
}
