use nalgebra::{DMatrix, DVector};

/// Symmetric matrix stored by rows over its lower envelope: row `i` keeps
/// columns `first[i]..=i`.
#[derive(Clone, Debug)]
pub struct Envelope {
    first: Vec<usize>,
    start: Vec<usize>,
    data: Vec<f64>,
}

impl Envelope {
    pub fn new(first: Vec<usize>) -> Self {
        let mut start = Vec::with_capacity(first.len() + 1);
        let mut total = 0;
        for (i, &f) in first.iter().enumerate() {
            debug_assert!(f <= i);
            start.push(total);
            total += i - f + 1;
        }
        start.push(total);
        Envelope {
            first,
            start,
            data: vec![0.0; total],
        }
    }

    pub fn dim(&self) -> usize {
        self.first.len()
    }

    pub fn stored(&self) -> usize {
        self.data.len()
    }

    pub fn first(&self, row: usize) -> usize {
        self.first[row]
    }

    #[inline]
    fn index(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i && j >= self.first[i], "({i},{j}) outside envelope");
        self.start[i] + j - self.first[i]
    }

    /// Entry `(i, j)` of the symmetric matrix, zero outside the envelope.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if j > i { (j, i) } else { (i, j) };
        if j < self.first[i] {
            0.0
        } else {
            self.data[self.index(i, j)]
        }
    }

    /// Adds to `(i, j)` with `j ≤ i`.
    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let k = self.index(i, j);
        self.data[k] += v;
    }

    pub fn diagonal(&self) -> DVector<f64> {
        DVector::from_fn(self.dim(), |i, _| self.data[self.index(i, i)])
    }

    pub fn add_diagonal(&mut self, d: &DVector<f64>) {
        for i in 0..self.dim() {
            let k = self.index(i, i);
            self.data[k] += d[i];
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.dim(), self.dim(), |i, j| self.get(i, j))
    }

    /// In-place Cholesky `A = L·Lᵀ`; the envelope is preserved by the
    /// factorization. Returns `None` if a pivot is not positive.
    pub fn cholesky(mut self) -> Option<EnvelopeCholesky> {
        let n = self.dim();
        for i in 0..n {
            let fi = self.first[i];
            for j in fi..=i {
                let fj = self.first[j];
                let lo = fi.max(fj);
                let ri = self.start[i] - fi;
                let rj = self.start[j] - fj;
                let mut s = self.data[ri + j];
                for k in lo..j {
                    s -= self.data[ri + k] * self.data[rj + k];
                }
                if j < i {
                    s /= self.data[rj + j];
                    self.data[ri + j] = s;
                } else {
                    if !(s > 0.0) || !s.is_finite() {
                        return None;
                    }
                    self.data[ri + i] = s.sqrt();
                }
            }
        }
        Some(EnvelopeCholesky { l: self })
    }
}

#[derive(Clone, Debug)]
pub struct EnvelopeCholesky {
    l: Envelope,
}

impl EnvelopeCholesky {
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let l = &self.l;
        let n = l.dim();
        let mut y = b.clone();
        for i in 0..n {
            let fi = l.first[i];
            let ri = l.start[i] - fi;
            let mut s = y[i];
            for k in fi..i {
                s -= l.data[ri + k] * y[k];
            }
            y[i] = s / l.data[ri + i];
        }
        // Backward substitution with Lᵀ, column-oriented over the rows of L.
        for i in (0..n).rev() {
            let fi = l.first[i];
            let ri = l.start[i] - fi;
            y[i] /= l.data[ri + i];
            let yi = y[i];
            for k in fi..i {
                y[k] -= l.data[ri + k] * yi;
            }
        }
        y
    }
}

/// Solves `A x = b` for symmetric positive definite `A` given by its envelope.
/// Small systems go through a dense factorization.
pub fn solve_spd(a: Envelope, b: &DVector<f64>, dense_below: usize) -> Option<DVector<f64>> {
    let x = if a.dim() < dense_below {
        a.to_dense().cholesky()?.solve(b)
    } else {
        a.cholesky()?.solve(b)
    };
    x.iter().all(|v| v.is_finite()).then_some(x)
}
