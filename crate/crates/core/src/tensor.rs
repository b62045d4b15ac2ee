//! Dense row-major tensors used throughout the crate.
//!
//! Compute happens in `f64`; file interchange (see [`crate::tensorio`]) uses
//! the narrower on-disk dtypes. Trainable parameters are kept on the `f32`
//! lattice (every value exactly representable as `f32`) so checkpoints
//! round-trip bit-exactly.

/// Dense row-major `f64` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Number of rows when viewed as a 2-D matrix `[rows, cols]`.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "expected 2-D tensor, got {:?}", self.shape);
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "expected 2-D tensor, got {:?}", self.shape);
        self.shape[1]
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn set2(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.shape[1];
        self.data[r * cols + c] = v;
    }

    /// Element at `(i, j, k)` of a 3-D tensor.
    pub fn at3(&self, i: usize, j: usize, k: usize) -> f64 {
        let (d1, d2) = (self.shape[1], self.shape[2]);
        self.data[(i * d1 + j) * d2 + k]
    }

    pub fn set3(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let (d1, d2) = (self.shape[1], self.shape[2]);
        self.data[(i * d1 + j) * d2 + k] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterprets the shape without touching data. Element counts must match.
    pub fn reshaped(&self, shape: Vec<usize>) -> Tensor {
        Tensor::new(shape, self.data.clone())
    }

    /// Rounds every element to the nearest `f32`, in place. Parameters live on
    /// this lattice so that float32 checkpoints are lossless.
    pub fn round_to_f32_lattice(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// `a @ b` for `a: [m, k]`, `b: [k, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    assert_eq!(k, k2, "matmul inner dims: {:?} x {:?}", a.shape, b.shape);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a^T @ b` for `a: [k, m]`, `b: [k, n]`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (k, m) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    assert_eq!(k, k2, "matmul_tn inner dims: {:?} x {:?}", a.shape, b.shape);
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a.data[p * m..(p + 1) * m];
        let brow = &b.data[p * n..(p + 1) * n];
        for i in 0..m {
            let av = arow[i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a @ b^T` for `a: [m, k]`, `b: [n, k]`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.rows(), a.cols());
    let (n, k2) = (b.rows(), b.cols());
    assert_eq!(k, k2, "matmul_nt inner dims: {:?} x {:?}", a.shape, b.shape);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            let mut s = 0.0;
            for p in 0..k {
                s += arow[p] * brow[p];
            }
            out[i * n + j] = s;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// 2-D integer label grid (instance ids, code indices, segmentation masks).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntGrid {
    pub h: usize,
    pub w: usize,
    pub data: Vec<i32>,
}

impl IntGrid {
    pub fn new(h: usize, w: usize, data: Vec<i32>) -> Self {
        assert_eq!(h * w, data.len(), "grid {}x{} does not match data length {}", h, w, data.len());
        IntGrid { h, w, data }
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        IntGrid {
            h,
            w,
            data: vec![0; h * w],
        }
    }

    pub fn at(&self, y: usize, x: usize) -> i32 {
        self.data[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: i32) {
        self.data[y * self.w + x] = v;
    }

    /// Distinct values present, ascending.
    pub fn distinct(&self) -> Vec<i32> {
        let mut vals: Vec<i32> = self.data.clone();
        vals.sort_unstable();
        vals.dedup();
        vals
    }

    /// Nearest-neighbor upsampling by an integer factor.
    pub fn upsample(&self, factor: usize) -> IntGrid {
        let (nh, nw) = (self.h * factor, self.w * factor);
        let mut out = IntGrid::zeros(nh, nw);
        for y in 0..nh {
            for x in 0..nw {
                out.set(y, x, self.at(y / factor, x / factor));
            }
        }
        out
    }
}
