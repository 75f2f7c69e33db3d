//! Symmetric matrices in skyline (variable-band) storage and their Cholesky
//! factorization.
//!
//! Row `i` stores columns `first[i]..=i` of the lower triangle. The Cholesky
//! factor has the same profile, so fill-in is confined to the envelope.

#[derive(Clone, Debug, PartialEq)]
pub struct SkylineMatrix {
    first: Vec<usize>,
    offsets: Vec<usize>,
    data: Vec<f64>,
}

impl SkylineMatrix {
    /// Zero matrix with row profile `first` (`first[i] <= i`).
    pub fn zeros(first: Vec<usize>) -> Self {
        let mut offsets = Vec::with_capacity(first.len() + 1);
        let mut acc = 0;
        for (i, &f) in first.iter().enumerate() {
            assert!(f <= i, "profile start {f} beyond diagonal {i}");
            offsets.push(acc);
            acc += i - f + 1;
        }
        offsets.push(acc);
        Self {
            first,
            offsets,
            data: vec![0.0; acc],
        }
    }

    pub fn dim(&self) -> usize {
        self.first.len()
    }

    pub fn stored(&self) -> usize {
        self.data.len()
    }

    fn slot(&self, i: usize, j: usize) -> Option<usize> {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        (j >= self.first[i]).then(|| self.offsets[i] + j - self.first[i])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.slot(i, j).map_or(0.0, |s| self.data[s])
    }

    /// Adds `v` at `(i, j)` (and by symmetry `(j, i)`). Panics outside the
    /// profile.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let s = self.slot(i, j).expect("entry outside skyline profile");
        self.data[s] += v;
    }

    pub fn add_diagonal(&mut self, v: f64) {
        for i in 0..self.dim() {
            let s = self.offsets[i] + i - self.first[i];
            self.data[s] += v;
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let mut y = vec![0.0; n];
        for i in 0..n {
            let row = &self.data[self.offsets[i]..self.offsets[i + 1]];
            for (k, &a) in row.iter().enumerate() {
                let j = self.first[i] + k;
                y[i] += a * x[j];
                if j != i {
                    y[j] += a * x[i];
                }
            }
        }
        y
    }

    /// `L Lᵀ` factorization; `None` unless the matrix is positive definite.
    pub fn cholesky(&self) -> Option<SkylineCholesky> {
        let n = self.dim();
        let mut l = self.data.clone();
        for i in 0..n {
            let fi = self.first[i];
            let oi = self.offsets[i];
            for j in fi..=i {
                let fj = self.first[j];
                let oj = self.offsets[j];
                let start = fi.max(fj);
                let mut s = l[oi + j - fi];
                for k in start..j {
                    s -= l[oi + k - fi] * l[oj + k - fj];
                }
                if j < i {
                    l[oi + j - fi] = s / l[oj + j - fj];
                } else {
                    if !(s > 0.0 && s.is_finite()) {
                        return None;
                    }
                    l[oi + i - fi] = s.sqrt();
                }
            }
        }
        Some(SkylineCholesky {
            first: self.first.clone(),
            offsets: self.offsets.clone(),
            l,
        })
    }
}

#[derive(Clone, Debug)]
pub struct SkylineCholesky {
    first: Vec<usize>,
    offsets: Vec<usize>,
    l: Vec<f64>,
}

impl SkylineCholesky {
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.first.len();
        let mut y = b.to_vec();
        for i in 0..n {
            let fi = self.first[i];
            let row = &self.l[self.offsets[i]..self.offsets[i + 1]];
            let mut s = y[i];
            for k in fi..i {
                s -= row[k - fi] * y[k];
            }
            y[i] = s / row[i - fi];
        }
        for i in (0..n).rev() {
            let fi = self.first[i];
            let row = &self.l[self.offsets[i]..self.offsets[i + 1]];
            y[i] /= row[i - fi];
            let yi = y[i];
            for k in fi..i {
                y[k] -= row[k - fi] * yi;
            }
        }
        y
    }
}
