//! Dense row-major f64 matrices and the raw kernels shared by the tape and
//! the no-grad forward paths. Rollout and training must produce bit-identical
//! activations, so both go through these exact routines.

use serde::{Deserialize, Serialize};

/// A 2-D matrix of f64, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor shape/data mismatch");
        Tensor { rows, cols, data }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Tensor {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// c = a @ b
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.rows, "matmul inner dims");
    let mut out = Tensor::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = b.row(k);
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    out
}

/// c = a^T @ b
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.rows, b.rows, "matmul_tn inner dims");
    let mut out = Tensor::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let arow = a.row(k);
        let brow = b.row(k);
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    out
}

/// c = a @ b^T
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.cols, "matmul_nt inner dims");
    let mut out = Tensor::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.rows {
            let brow = b.row(j);
            let mut s = 0.0;
            for (&av, &bv) in arow.iter().zip(brow.iter()) {
                s += av * bv;
            }
            out.data[i * b.rows + j] = s;
        }
    }
    out
}

pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    assert!(a.same_shape(b), "add shape mismatch");
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    Tensor::from_vec(a.rows, a.cols, data)
}

/// a [m,n] + row [1,n], broadcast over rows.
pub fn add_row(a: &Tensor, row: &Tensor) -> Tensor {
    assert_eq!(row.rows, 1, "broadcast operand must be a row vector");
    assert_eq!(a.cols, row.cols, "add_row width mismatch");
    let mut out = a.clone();
    for r in 0..out.rows {
        for c in 0..out.cols {
            out.data[r * out.cols + c] += row.data[c];
        }
    }
    out
}

pub fn sub(a: &Tensor, b: &Tensor) -> Tensor {
    assert!(a.same_shape(b), "sub shape mismatch");
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect();
    Tensor::from_vec(a.rows, a.cols, data)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Tensor {
    assert!(a.same_shape(b), "mul shape mismatch");
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
    Tensor::from_vec(a.rows, a.cols, data)
}

/// k*a + c, elementwise.
pub fn affine(a: &Tensor, k: f64, c: f64) -> Tensor {
    let data = a.data.iter().map(|x| k * x + c).collect();
    Tensor::from_vec(a.rows, a.cols, data)
}

pub fn tanh(a: &Tensor) -> Tensor {
    let data = a.data.iter().map(|x| x.tanh()).collect();
    Tensor::from_vec(a.rows, a.cols, data)
}

pub fn sigmoid(a: &Tensor) -> Tensor {
    let data = a.data.iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect();
    Tensor::from_vec(a.rows, a.cols, data)
}

pub fn exp(a: &Tensor) -> Tensor {
    let data = a.data.iter().map(|x| x.exp()).collect();
    Tensor::from_vec(a.rows, a.cols, data)
}

pub fn clamp(a: &Tensor, lo: f64, hi: f64) -> Tensor {
    let data = a.data.iter().map(|x| x.clamp(lo, hi)).collect();
    Tensor::from_vec(a.rows, a.cols, data)
}

pub fn min_elem(a: &Tensor, b: &Tensor) -> Tensor {
    assert!(a.same_shape(b), "min shape mismatch");
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| if y < x { *y } else { *x })
        .collect();
    Tensor::from_vec(a.rows, a.cols, data)
}

/// Row-wise log-softmax. Subtracts the row max first, so it is exact for any
/// finite logits.
pub fn log_softmax_rows(a: &Tensor) -> Tensor {
    let mut out = a.clone();
    for r in 0..a.rows {
        let row = &mut out.data[r * a.cols..(r + 1) * a.cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

/// Picks one column per row: out[i,0] = a[i, idx[i]].
pub fn gather_rows(a: &Tensor, idx: &[usize]) -> Tensor {
    assert_eq!(idx.len(), a.rows, "gather index length");
    let data = idx
        .iter()
        .enumerate()
        .map(|(r, &c)| {
            assert!(c < a.cols, "gather index out of range");
            a.get(r, c)
        })
        .collect();
    Tensor::from_vec(a.rows, 1, data)
}

pub fn sum_all(a: &Tensor) -> Tensor {
    Tensor::scalar(a.data.iter().sum())
}
