//! The mean-field simplex `M_n`: compositions of `n` into `k` parts.
//!
//! Mean-fields are integer count vectors. The canonical order is
//! lexicographic on the counts, so `(0, .., 0, n)` has rank 0 and
//! `(n, 0, .., 0)` has the last rank. Ranking uses the combinatorial number
//! system and needs no lookup table.

use std::fmt;

use num_bigint::BigUint;

use crate::error::{Error, Result};

/// Empirical distribution of `n` subsystems over `k` local states, stored as counts.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MeanField {
    counts: Vec<u32>,
}

impl MeanField {
    pub fn new(counts: Vec<u32>) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::invalid(
                "mean_field",
                "needs at least one local state",
            ));
        }
        Ok(MeanField { counts })
    }

    /// Point mass: all `n` subsystems in `state`.
    pub fn dirac(n: u32, k: usize, state: usize) -> Self {
        let mut counts = vec![0; k];
        counts[state] = n;
        MeanField { counts }
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn count(&self, state: usize) -> u32 {
        self.counts[state]
    }

    pub fn n(&self) -> u32 {
        self.counts.iter().sum()
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    /// `z(x) = counts[x] / n`.
    pub fn fraction(&self, state: usize) -> f64 {
        f64::from(self.counts[state]) / f64::from(self.n())
    }

    pub fn fractions(&self) -> Vec<f64> {
        let n = f64::from(self.n());
        self.counts.iter().map(|&c| f64::from(c) / n).collect()
    }

    /// A joint state in `H(z)`: states in ascending order.
    pub fn sorted_joint_state(&self) -> Vec<usize> {
        let mut joint = Vec::with_capacity(self.n() as usize);
        for (x, &c) in self.counts.iter().enumerate() {
            joint.extend(std::iter::repeat_n(x, c as usize));
        }
        joint
    }
}

impl fmt::Display for MeanField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, c) in self.counts.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, ")")
    }
}

/// Number of compositions of `total` into `parts` nonnegative parts.
pub fn composition_count(total: usize, parts: usize) -> usize {
    if parts == 0 {
        return usize::from(total == 0);
    }
    binomial(total + parts - 1, parts - 1)
}

fn binomial(n: usize, r: usize) -> usize {
    let r = r.min(n - r);
    let mut acc: u128 = 1;
    for i in 0..r {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    usize::try_from(acc).expect("binomial coefficient overflows usize")
}

/// All of `M_n` in lexicographic order of the count vectors.
pub fn enumerate_mean_fields(n: usize, k: usize) -> Vec<MeanField> {
    let mut out = Vec::with_capacity(composition_count(n, k));
    let mut counts = vec![0u32; k];
    fill(&mut out, &mut counts, 0, n as u32);
    out
}

fn fill(out: &mut Vec<MeanField>, counts: &mut [u32], pos: usize, remaining: u32) {
    if pos + 1 == counts.len() {
        counts[pos] = remaining;
        out.push(MeanField {
            counts: counts.to_vec(),
        });
        return;
    }
    for v in 0..=remaining {
        counts[pos] = v;
        fill(out, counts, pos + 1, remaining - v);
    }
}

/// Lexicographic rank of `z` within `M_n`, `n = z.n()`.
pub fn rank(z: &MeanField) -> usize {
    let k = z.k();
    let mut remaining = z.n() as usize;
    let mut r = 0;
    for (i, &c) in z.counts[..k - 1].iter().enumerate() {
        for v in 0..c as usize {
            r += composition_count(remaining - v, k - i - 1);
        }
        remaining -= c as usize;
    }
    r
}

/// Inverse of [`rank`].
pub fn unrank(index: usize, n: usize, k: usize) -> Result<MeanField> {
    let len = composition_count(n, k);
    if index >= len {
        return Err(Error::IndexOutOfRange { index, len });
    }
    let mut idx = index;
    let mut remaining = n;
    let mut counts = vec![0u32; k];
    for (i, slot) in counts.iter_mut().enumerate().take(k - 1) {
        let mut v = 0;
        loop {
            let block = composition_count(remaining - v, k - i - 1);
            if idx < block {
                break;
            }
            idx -= block;
            v += 1;
        }
        *slot = v as u32;
        remaining -= v;
    }
    counts[k - 1] = remaining as u32;
    Ok(MeanField { counts })
}

/// Empirical distribution of a joint state with entries in `0..k`.
pub fn mean_field_of(joint_state: &[usize], k: usize) -> Result<MeanField> {
    let mut counts = vec![0u32; k];
    for (i, &x) in joint_state.iter().enumerate() {
        if x >= k {
            return Err(Error::invalid(
                format!("joint_state[{i}]"),
                format!("local state {x} is outside 0..{k}"),
            ));
        }
        counts[x] += 1;
    }
    Ok(MeanField { counts })
}

/// `|H(z)| = n! / prod_x counts[x]!`, exactly.
pub fn class_size(z: &MeanField) -> BigUint {
    let mut acc = BigUint::from(1u32);
    let mut placed: u64 = 0;
    // product of binomials C(placed + c, c), each step stays integral
    for &c in &z.counts {
        for j in 1..=u64::from(c) {
            acc *= placed + j;
            acc /= j;
        }
        placed += u64::from(c);
    }
    acc
}

/// `ln |H(z)|`.
pub fn ln_class_size(z: &MeanField) -> f64 {
    ln_factorial(z.n() as usize)
        - z.counts
            .iter()
            .map(|&c| ln_factorial(c as usize))
            .sum::<f64>()
}

pub(crate) fn ln_factorial(m: usize) -> f64 {
    (2..=m).map(|i| (i as f64).ln()).sum()
}

/// Dense indexing of `M_n` for one `(n, k)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MeanFieldSpace {
    n: usize,
    k: usize,
    fields: Vec<MeanField>,
}

impl MeanFieldSpace {
    pub fn new(n: usize, k: usize) -> Self {
        MeanFieldSpace {
            n,
            k,
            fields: enumerate_mean_fields(n, k),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn get(&self, index: usize) -> Result<&MeanField> {
        self.fields.get(index).ok_or(Error::IndexOutOfRange {
            index,
            len: self.fields.len(),
        })
    }

    pub fn fields(&self) -> &[MeanField] {
        &self.fields
    }

    pub fn rank(&self, z: &MeanField) -> Result<usize> {
        if z.k() != self.k || z.n() as usize != self.n {
            return Err(Error::DimensionMismatch(format!(
                "mean-field {z} is not in M_{} over {} states",
                self.n, self.k
            )));
        }
        Ok(rank(z))
    }

    /// Rank of a count vector assumed to lie in this space.
    pub(crate) fn rank_counts(&self, counts: &[u32]) -> usize {
        let mut remaining = self.n;
        let mut r = 0;
        for (i, &c) in counts[..self.k - 1].iter().enumerate() {
            for v in 0..c as usize {
                r += composition_count(remaining - v, self.k - i - 1);
            }
            remaining -= c as usize;
        }
        r
    }
}
