use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnsembleError {
    #[error("an ensemble needs at least two members, got {0}")]
    TooFewMembers(usize),
    #[error("member {member} has length {len}, expected {expected}")]
    RaggedMembers { member: usize, len: usize, expected: usize },
    #[error("ensemble shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
}

/// `k` member states of length `n`, stored member-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleState {
    k: usize,
    n: usize,
    data: Vec<f64>,
}

impl EnsembleState {
    pub fn from_members(members: Vec<Vec<f64>>) -> Result<Self, EnsembleError> {
        let k = members.len();
        if k < 2 {
            return Err(EnsembleError::TooFewMembers(k));
        }
        let n = members[0].len();
        let mut data = Vec::with_capacity(k * n);
        for (member, m) in members.into_iter().enumerate() {
            if m.len() != n {
                return Err(EnsembleError::RaggedMembers {
                    member,
                    len: m.len(),
                    expected: n,
                });
            }
            data.extend(m);
        }
        Ok(Self { k, n, data })
    }

    pub fn from_flat(k: usize, n: usize, data: Vec<f64>) -> Result<Self, EnsembleError> {
        if k < 2 {
            return Err(EnsembleError::TooFewMembers(k));
        }
        if data.len() != k * n {
            return Err(EnsembleError::RaggedMembers {
                member: 0,
                len: data.len(),
                expected: k * n,
            });
        }
        Ok(Self { k, n, data })
    }

    pub fn size(&self) -> usize {
        self.k
    }

    pub fn state_len(&self) -> usize {
        self.n
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.k, self.n)
    }

    pub fn member(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn member_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn members(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.n.max(1)).take(self.k)
    }

    pub fn members_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        let n = self.n.max(1);
        self.data.chunks_exact_mut(n)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn as_flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, member: usize, index: usize) -> f64 {
        self.data[member * self.n + index]
    }

    /// Ensemble mean per state element.
    pub fn mean(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.n];
        for m in self.members() {
            for (acc, x) in mean.iter_mut().zip(m) {
                *acc += x;
            }
        }
        let inv = 1.0 / self.k as f64;
        mean.iter_mut().for_each(|v| *v *= inv);
        mean
    }

    /// Member deviations from the mean, in the same layout as the members.
    pub fn perturbations(&self) -> EnsembleState {
        let mean = self.mean();
        let mut out = self.clone();
        for m in out.members_mut() {
            for (x, mu) in m.iter_mut().zip(&mean) {
                *x -= mu;
            }
        }
        out
    }

    /// Sample standard deviation (divisor `k - 1`) per state element.
    pub fn std_dev(&self) -> Vec<f64> {
        let mean = self.mean();
        let mut var = vec![0.0; self.n];
        for m in self.members() {
            for ((acc, x), mu) in var.iter_mut().zip(m).zip(&mean) {
                let d = x - mu;
                *acc += d * d;
            }
        }
        let inv = 1.0 / (self.k - 1) as f64;
        var.into_iter().map(|v| (v * inv).sqrt()).collect()
    }

    /// Rebuild members as `mean + perturbation`.
    pub fn from_mean_and_perturbations(mean: &[f64], perturbations: &EnsembleState) -> Self {
        let mut out = perturbations.clone();
        for m in out.members_mut() {
            for (x, mu) in m.iter_mut().zip(mean) {
                *x += mu;
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_same_shape(&self, other: &EnsembleState) -> Result<(), EnsembleError> {
        if self.shape() != other.shape() {
            return Err(EnsembleError::ShapeMismatch(self.shape(), other.shape()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn statistics() {
        let e = EnsembleState::from_members(vec![vec![1.0, 2.0], vec![3.0, 2.0], vec![5.0, 2.0]]).unwrap();
        assert_eq!(e.mean(), vec![3.0, 2.0]);
        assert_eq!(e.std_dev(), vec![2.0, 0.0]);
        let p = e.perturbations();
        assert_eq!(p.member(0), &[-2.0, 0.0]);
        let back = EnsembleState::from_mean_and_perturbations(&e.mean(), &p);
        assert_eq!(back, e);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert_eq!(
            EnsembleState::from_members(vec![vec![1.0]]),
            Err(EnsembleError::TooFewMembers(1))
        );
        assert!(EnsembleState::from_members(vec![vec![1.0], vec![1.0, 2.0]]).is_err());
        assert!(EnsembleState::from_flat(2, 3, vec![0.0; 5]).is_err());
    }
}
