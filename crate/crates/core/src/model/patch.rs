use crate::error::{dim_err, Result};
use crate::tensor::{Mask, Tape, Tensor, Var};

/// Split of a length-`len` sequence into `patches` × `patch_len` steps, with
/// `pad_len` zeros in front.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGeometry {
    pub len: usize,
    pub patches: usize,
    pub patch_len: usize,
    pub pad_len: usize,
}

impl PatchGeometry {
    /// `patches == patch_len == ceil(sqrt(len))`.
    pub fn new(len: usize) -> Self {
        let k = ceil_sqrt(len);
        Self {
            len,
            patches: k,
            patch_len: k,
            pad_len: k * k - len,
        }
    }

    pub fn padded_len(&self) -> usize {
        self.patches * self.patch_len
    }

    /// `[patches, K, K]` key mask that hides padding keys from every query but
    /// the padding token itself.
    pub fn padding_mask(&self) -> Mask {
        let k = self.patch_len;
        let mut keep = Vec::with_capacity(self.patches * k * k);
        for p in 0..self.patches {
            for i in 0..k {
                for j in 0..k {
                    keep.push(i == j || p * k + j >= self.pad_len);
                }
            }
        }
        Mask::new(&[self.patches, k, k], keep).expect("mask shape matches")
    }
}

/// Smallest `k` with `k * k >= n`.
pub fn ceil_sqrt(n: usize) -> usize {
    let mut k = (n as f64).sqrt() as usize;
    while k * k < n {
        k += 1;
    }
    while k > 0 && (k - 1) * (k - 1) >= n {
        k -= 1;
    }
    k
}

/// Zero-padded patches of an embedded sequence.
#[derive(Debug, Clone, Copy)]
pub struct PatchSet {
    /// `[.., patches, patch_len, D]`
    pub patches: Var,
    pub geometry: PatchGeometry,
}

/// Front-pads `x: [B, L, D]` with zeros to `P·K` steps and reshapes to `[B, P, K, D]`.
pub fn segment(tape: &mut Tape, x: Var) -> Result<PatchSet> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || s[1] == 0 {
        return Err(dim_err!("segment expects [B, L >= 1, D], got {:?}", s));
    }
    let (b, len, d) = (s[0], s[1], s[2]);
    let geometry = PatchGeometry::new(len);
    let padded = if geometry.pad_len > 0 {
        let zeros = tape.constant(Tensor::zeros(&[b, geometry.pad_len, d]));
        tape.concat(&[zeros, x], 1)?
    } else {
        x
    };
    let patches = tape.reshape(padded, &[b, geometry.patches, geometry.patch_len, d])?;
    Ok(PatchSet { patches, geometry })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_geometries() {
        assert_eq!(
            PatchGeometry::new(96),
            PatchGeometry { len: 96, patches: 10, patch_len: 10, pad_len: 4 }
        );
        assert_eq!(PatchGeometry::new(4).pad_len, 0);
        assert_eq!(PatchGeometry::new(4).patches, 2);
        let one = PatchGeometry::new(1);
        assert_eq!((one.patches, one.patch_len, one.pad_len), (1, 1, 0));
    }

    #[test]
    fn ceil_sqrt_matches_float_ceil() {
        for n in 1..5000usize {
            assert_eq!(ceil_sqrt(n), (n as f64).sqrt().ceil() as usize, "n = {n}");
        }
    }

    #[test]
    fn perfect_square_patches_in_order() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 4, 1], vec![0., 1., 2., 3.]).unwrap());
        let ps = segment(&mut tape, x).unwrap();
        assert_eq!(tape.shape(ps.patches), &[1, 2, 2, 1]);
        assert_eq!(tape.data(ps.patches), &[0., 1., 2., 3.]);
    }

    #[test]
    fn padding_goes_in_front() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (1..=5).map(f64::from).collect();
        let x = tape.constant(Tensor::new(&[1, 5, 1], data).unwrap());
        let ps = segment(&mut tape, x).unwrap();
        assert_eq!(ps.geometry.pad_len, 4);
        assert_eq!(tape.data(ps.patches), &[0., 0., 0., 0., 1., 2., 3., 4., 5.]);
    }

    #[test]
    fn padding_mask_keeps_self_and_real_keys() {
        let g = PatchGeometry::new(7); // K = 3, pad 2
        let m = g.padding_mask();
        let keep = m.keep();
        // patch 0, query 0 (a pad) sees only itself.
        assert_eq!(&keep[0..3], &[true, false, true]);
        // patch 0, query 2 (real) skips both pads.
        assert_eq!(&keep[6..9], &[false, false, true]);
        // patch 1 has no pads.
        assert!(keep[9..18].iter().all(|&k| k));
    }
}
