use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Mean,
    Sum,
    Max,
    Min,
}

/// Reduces `t` over `axes`, dropping them from the shape.
///
/// Each output element visits its inputs in row-major order of the reduced
/// axes. Reducing over an axis of extent zero is an error.
pub fn reduce<T: Real>(t: &Tensor<T>, op: ReduceOp, axes: &[usize]) -> Result<Tensor<T>> {
    let rank = t.rank();
    let mut reduced = vec![false; rank];
    for &a in axes {
        if a >= rank {
            return Err(Error::dim(format!("axis {a} out of range for rank {rank}")));
        }
        if reduced[a] {
            return Err(Error::dim(format!("axis {a} listed twice")));
        }
        reduced[a] = true;
    }
    let shape = t.shape();
    let count: usize = (0..rank).filter(|&a| reduced[a]).map(|a| shape[a]).product();
    if count == 0 {
        return Err(Error::dim(format!(
            "reduction over empty extent in shape {shape:?}"
        )));
    }

    let out_shape: Vec<usize> = (0..rank).filter(|&a| !reduced[a]).map(|a| shape[a]).collect();
    let out_len: usize = out_shape.iter().product();
    let mut strides = vec![1usize; rank];
    for a in (0..rank.saturating_sub(1)).rev() {
        strides[a] = strides[a + 1] * shape[a + 1];
    }
    let kept: Vec<usize> = (0..rank).filter(|&a| !reduced[a]).collect();
    let red: Vec<usize> = (0..rank).filter(|&a| reduced[a]).collect();

    let data = t.data();
    let mut out = Vec::with_capacity(out_len);
    let mut kept_idx = vec![0usize; kept.len()];
    for _ in 0..out_len {
        let base: usize = kept.iter().zip(&kept_idx).map(|(&a, &i)| i * strides[a]).sum();
        let mut red_idx = vec![0usize; red.len()];
        let mut acc = match op {
            ReduceOp::Mean | ReduceOp::Sum => T::zero(),
            ReduceOp::Max => T::neg_infinity(),
            ReduceOp::Min => T::infinity(),
        };
        for _ in 0..count {
            let off: usize = red.iter().zip(&red_idx).map(|(&a, &i)| i * strides[a]).sum();
            let v = data[base + off];
            match op {
                ReduceOp::Mean | ReduceOp::Sum => acc += v,
                ReduceOp::Max => {
                    if v > acc {
                        acc = v
                    }
                }
                ReduceOp::Min => {
                    if v < acc {
                        acc = v
                    }
                }
            }
            advance(&mut red_idx, &red, shape);
        }
        if op == ReduceOp::Mean {
            acc = acc / T::of(count as f64);
        }
        out.push(acc);
        advance(&mut kept_idx, &kept, shape);
    }
    Tensor::new(out_shape, out)
}

fn advance(idx: &mut [usize], axes: &[usize], shape: &[usize]) {
    for pos in (0..idx.len()).rev() {
        idx[pos] += 1;
        if idx[pos] < shape[axes[pos]] {
            return;
        }
        idx[pos] = 0;
    }
}
