use crate::error::{dim_err, Result};

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = dim_from_right(a, rank - 1 - i);
        let db = dim_from_right(b, rank - 1 - i);
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(dim_err!(
                    "shapes {:?} and {:?} are not broadcast-compatible",
                    a,
                    b
                ))
            }
        };
    }
    Ok(out)
}

fn dim_from_right(shape: &[usize], from_right: usize) -> usize {
    if from_right < shape.len() {
        shape[shape.len() - 1 - from_right]
    } else {
        1
    }
}

/// How the elements of an operand map onto a broadcast output.
#[derive(Debug, Clone)]
pub(crate) enum Mapping {
    /// Operand has the output's shape.
    Identity,
    /// Operand is a trailing block repeated over leading dims: offset = i % len.
    Suffix(usize),
    /// Explicit offset per output element.
    Offsets(Vec<usize>),
}

impl Mapping {
    pub(crate) fn new(operand: &[usize], out: &[usize]) -> Self {
        if operand == out {
            return Mapping::Identity;
        }
        let numel: usize = operand.iter().product();
        let stripped: Vec<usize> = operand
            .iter()
            .copied()
            .skip_while(|&d| d == 1)
            .collect();
        if out.ends_with(&stripped) {
            return Mapping::Suffix(numel.max(1));
        }
        Mapping::Offsets(explicit_offsets(operand, out))
    }

    #[inline]
    pub(crate) fn at(&self, i: usize) -> usize {
        match self {
            Mapping::Identity => i,
            Mapping::Suffix(n) => i % n,
            Mapping::Offsets(o) => o[i],
        }
    }
}

fn explicit_offsets(operand: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let pad = rank - operand.len();
    // Strides of the operand laid onto the output rank, 0 on broadcast dims.
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..operand.len()).rev() {
        if operand[i] != 1 {
            strides[i + pad] = acc;
        }
        acc *= operand[i];
    }
    let numel: usize = out.iter().product();
    let mut offsets = Vec::with_capacity(numel);
    let mut index = vec![0usize; rank];
    for _ in 0..numel {
        offsets.push(index.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for d in (0..rank).rev() {
            index[d] += 1;
            if index[d] < out[d] {
                break;
            }
            index[d] = 0;
        }
    }
    offsets
}
