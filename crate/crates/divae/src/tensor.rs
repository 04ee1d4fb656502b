//! Dense row-major f64 tensors. Rank 1 and rank 2 cover everything here;
//! scalars are length-1 rank-1 tensors.

/// Row-major dense tensor of 64-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
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
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![value; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows of a rank-2 tensor; a rank-1 tensor is treated as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            r => panic!("rows() on rank-{r} tensor"),
        }
    }

    /// Length of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("cols() on rank-0 tensor")
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[r * self.shape[1] + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        debug_assert_eq!(self.shape.len(), 2);
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    /// First (and only) element of a scalar tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Reinterpret with a new shape of equal element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Tensor {
        Tensor::new(shape, self.data.clone())
    }
}

/// out = a[r,k] @ b[k,c]
pub fn matmul(a: &Tensor, b: &Tensor, out: &mut [f64]) {
    let (r, k) = (a.shape()[0], a.shape()[1]);
    let c = b.shape()[1];
    assert_eq!(b.shape()[0], k, "matmul inner dims {} vs {}", k, b.shape()[0]);
    assert_eq!(out.len(), r * c);
    out.fill(0.0);
    let ad = a.data();
    let bd = b.data();
    for i in 0..r {
        for p in 0..k {
            let aip = ad[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &bd[p * c..(p + 1) * c];
            let orow = &mut out[i * c..(i + 1) * c];
            for j in 0..c {
                orow[j] += aip * brow[j];
            }
        }
    }
}

/// out = a[r,k] @ b[c,k]^T
pub fn matmul_bt(a: &Tensor, b: &Tensor, out: &mut [f64]) {
    let (r, k) = (a.shape()[0], a.shape()[1]);
    let c = b.shape()[0];
    assert_eq!(b.shape()[1], k);
    assert_eq!(out.len(), r * c);
    let ad = a.data();
    let bd = b.data();
    for i in 0..r {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..c {
            let brow = &bd[j * k..(j + 1) * k];
            let mut s = 0.0;
            for p in 0..k {
                s += arow[p] * brow[p];
            }
            out[i * c + j] = s;
        }
    }
}

/// out = a[k,r]^T @ b[k,c]
pub fn matmul_at(a: &Tensor, b: &Tensor, out: &mut [f64]) {
    let (k, r) = (a.shape()[0], a.shape()[1]);
    let c = b.shape()[1];
    assert_eq!(b.shape()[0], k);
    assert_eq!(out.len(), r * c);
    out.fill(0.0);
    let ad = a.data();
    let bd = b.data();
    for p in 0..k {
        let arow = &ad[p * r..(p + 1) * r];
        let brow = &bd[p * c..(p + 1) * c];
        for i in 0..r {
            let api = arow[i];
            if api == 0.0 {
                continue;
            }
            let orow = &mut out[i * c..(i + 1) * c];
            for j in 0..c {
                orow[j] += api * brow[j];
            }
        }
    }
}

/// Numerically stable log(sum(exp(xs))).
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

/// Pairwise (cascade) summation; order-stable to ~1e-16 relative error.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        2 => xs[0] + xs[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
        }
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    pairwise_sum(xs) / xs.len() as f64
}

pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let sq: Vec<f64> = xs.iter().map(|&x| (x - m) * (x - m)).collect();
    (pairwise_sum(&sq) / (xs.len() - 1) as f64).sqrt()
}
