use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rewrite::relative_error;
use crate::tensor::Tensor;

/// Compressed-row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub rows: usize,
    pub cols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f32>,
}

impl CsrMatrix {
    pub fn from_dense(t: &Tensor<f32>) -> Result<Self> {
        if t.rank() != 2 {
            return Err(Error::Shape(format!(
                "csr needs a matrix, got {:?}",
                t.shape()
            )));
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        let mut row_ptr = Vec::with_capacity(rows + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for row in t.data().chunks(cols) {
            for (j, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    col_idx.push(j);
                    values.push(v);
                }
            }
            row_ptr.push(values.len());
        }
        Ok(CsrMatrix {
            rows,
            cols,
            row_ptr,
            col_idx,
            values,
        })
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// `self * rhs` for a dense `[cols, n]` right-hand side.
    pub fn matmul(&self, rhs: &Tensor<f32>) -> Result<Tensor<f32>> {
        if rhs.rank() != 2 || rhs.shape()[0] != self.cols {
            return Err(Error::Shape(format!(
                "csr [{}, {}] times {:?}",
                self.rows,
                self.cols,
                rhs.shape()
            )));
        }
        let n = rhs.shape()[1];
        let b = rhs.data();
        let mut out = vec![0.0f32; self.rows * n];
        for (i, dst) in out.chunks_mut(n).enumerate() {
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                let v = self.values[p];
                let src = &b[self.col_idx[p] * n..(self.col_idx[p] + 1) * n];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += v * s;
                }
            }
        }
        Ok(Tensor::new(vec![self.rows, n], out)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparseTiming {
    pub ratio: f64,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub zero_rows: usize,
    /// Building the compressed-row form.
    pub convert_s: f64,
    pub sparse_s: f64,
    pub dense_s: f64,
    pub rel_diff: f64,
}

/// Multiplies an `[m, k]` operand with `ceil(ratio * m)` zeroed rows by a
/// dense `[k, n]` matrix both ways; times are the best of `reps`.
pub fn sparse_baseline_gemm(
    ratio: f64,
    m: usize,
    k: usize,
    n: usize,
    reps: usize,
    seed: u64,
) -> Result<SparseTiming> {
    if !(0.0..=1.0).contains(&ratio) || reps == 0 {
        return Err(Error::Config(
            "sparse baseline needs ratio in [0, 1] and reps >= 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zero_rows = ((ratio * m as f64) - 1e-9).ceil().max(0.0) as usize;
    let mut rows: Vec<usize> = (0..m).collect();
    rows.shuffle(&mut rng);
    let mut a: Vec<f32> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
    for &r in &rows[..zero_rows] {
        a[r * k..(r + 1) * k].fill(0.0);
    }
    let a = Tensor::new(vec![m, k], a)?;
    let b = Tensor::new(
        vec![k, n],
        (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )?;

    let t0 = Instant::now();
    let csr = CsrMatrix::from_dense(&a)?;
    let convert_s = t0.elapsed().as_secs_f64();

    let mut dense_s = f64::INFINITY;
    let mut sparse_s = f64::INFINITY;
    let mut dense = None;
    let mut sparse = None;
    for _ in 0..reps {
        let t0 = Instant::now();
        dense = Some(a.matmul(&b)?);
        dense_s = dense_s.min(t0.elapsed().as_secs_f64());
        let t0 = Instant::now();
        sparse = Some(csr.matmul(&b)?);
        sparse_s = sparse_s.min(t0.elapsed().as_secs_f64());
    }
    let (dense, sparse) = (dense.expect("reps >= 1"), sparse.expect("reps >= 1"));
    Ok(SparseTiming {
        ratio,
        m,
        k,
        n,
        zero_rows,
        convert_s,
        sparse_s,
        dense_s,
        rel_diff: relative_error(&sparse, &dense),
    })
}
