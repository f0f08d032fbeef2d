use crate::error::{bail, Result};
use crate::numerics::Tensor;

const STOCHASTIC_TOL: f64 = 1e-6;

/// Row-stochastic `[V×V]` matrix with `Q[i][j] = q(x_t = j | x_{t-1} = i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionMatrix {
    pub t: usize,
    q: Tensor,
}

impl TransitionMatrix {
    pub fn new(t: usize, q: Tensor) -> Result<Self> {
        let (r, c) = q.dims2()?;
        if r != c || r == 0 {
            bail!(Validation, "transition matrix must be square and non-empty, got {}x{}", r, c);
        }
        for i in 0..r {
            let row = q.row(i);
            if row.iter().any(|&p| !(p >= 0.0)) {
                bail!(Validation, "row {} has a negative or NaN entry", i);
            }
            let s: f64 = row.iter().map(|&p| p as f64).sum();
            if (s - 1.0).abs() > STOCHASTIC_TOL {
                bail!(Validation, "row {} sums to {}", i, s);
            }
        }
        Ok(Self { t, q })
    }

    pub fn identity(t: usize, v: usize) -> Self {
        Self { t, q: Tensor::eye(v) }
    }

    /// `(1-β)·I + β/V`: resample uniformly with probability `β`.
    pub fn uniform(t: usize, v: usize, beta: f32) -> Result<Self> {
        let mut q = vec![beta / v as f32; v * v];
        for i in 0..v {
            q[i * v + i] += 1.0 - beta;
        }
        Self::new(t, Tensor::new(&[v, v], q)?)
    }

    /// Absorbing-state kernel over `V + 1` states; the last state is `MASK`
    /// and every other state jumps to it with probability `β`.
    pub fn absorbing(t: usize, v: usize, beta: f32) -> Result<Self> {
        let n = v + 1;
        let mut q = vec![0.0f32; n * n];
        for i in 0..v {
            q[i * n + i] = 1.0 - beta;
            q[i * n + v] = beta;
        }
        q[v * n + v] = 1.0;
        Self::new(t, Tensor::new(&[n, n], q)?)
    }

    pub fn states(&self) -> usize {
        self.q.shape()[0]
    }

    pub fn matrix(&self) -> &Tensor {
        &self.q
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.q.row(i)[j]
    }
}

/// `dist · Q`, the categorical law of `x_t` given the law of `x_{t-1}`.
pub fn forward_step(dist: &[f32], q: &TransitionMatrix) -> Result<Vec<f32>> {
    let v = q.states();
    if dist.len() != v {
        bail!(Validation, "distribution over {} states for a {}-state kernel", dist.len(), v);
    }
    let s: f64 = dist.iter().map(|&p| p as f64).sum();
    if (s - 1.0).abs() > 1e-5 || dist.iter().any(|&p| !(p >= 0.0)) {
        bail!(Validation, "input is not a distribution (sum {})", s);
    }
    Ok((0..v)
        .map(|j| (0..v).map(|i| dist[i] as f64 * q.get(i, j) as f64).sum::<f64>() as f32)
        .collect())
}

/// Ordered product `Q_1 Q_2 ⋯ Q_t`, tagged with the last step index.
pub fn cumulative(qs: &[TransitionMatrix]) -> Result<TransitionMatrix> {
    let Some(first) = qs.first() else {
        bail!(Validation, "cumulative product of an empty list");
    };
    let v = first.states();
    if let Some(bad) = qs.iter().find(|q| q.states() != v) {
        bail!(Validation, "mixed state counts {} and {}", v, bad.states());
    }
    let mut acc: Vec<f64> = first.q.data().iter().map(|&x| x as f64).collect();
    for q in &qs[1..] {
        let mut next = vec![0.0f64; v * v];
        for i in 0..v {
            for k in 0..v {
                let a = acc[i * v + k];
                for j in 0..v {
                    next[i * v + j] += a * q.get(k, j) as f64;
                }
            }
        }
        acc = next;
    }
    let last = qs.last().expect("non-empty").t;
    TransitionMatrix::new(last, Tensor::new(&[v, v], acc.into_iter().map(|x| x as f32).collect())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_uniform_kernels() {
        let id = TransitionMatrix::identity(1, 3);
        assert_eq!(forward_step(&[0.2, 0.3, 0.5], &id).unwrap(), vec![0.2, 0.3, 0.5]);
        let u = TransitionMatrix::uniform(1, 4, 1.0).unwrap();
        for d in forward_step(&[1.0, 0.0, 0.0, 0.0], &u).unwrap() {
            assert!((d - 0.25).abs() < 1e-7);
        }
    }

    #[test]
    fn rejects_non_stochastic() {
        let q = Tensor::new(&[2, 2], vec![0.5, 0.4, 0.0, 1.0]).unwrap();
        assert!(matches!(TransitionMatrix::new(0, q), Err(crate::Error::Validation(_))));
        let neg = Tensor::new(&[2, 2], vec![1.5, -0.5, 0.0, 1.0]).unwrap();
        assert!(TransitionMatrix::new(0, neg).is_err());
    }

    #[test]
    fn cumulative_of_one_and_mismatch() {
        let q = TransitionMatrix::uniform(3, 3, 0.3).unwrap();
        assert_eq!(cumulative(std::slice::from_ref(&q)).unwrap(), q);
        let other = TransitionMatrix::identity(4, 2);
        assert!(cumulative(&[q, other]).is_err());
        assert!(cumulative(&[]).is_err());
    }

    #[test]
    fn absorbing_reaches_mask() {
        let q = TransitionMatrix::absorbing(1, 2, 1.0).unwrap();
        assert_eq!(forward_step(&[0.5, 0.5, 0.0], &q).unwrap(), vec![0.0, 0.0, 1.0]);
    }
}
