//! Exact next-mean-field law by multinomial convolution.
//!
//! Given `z` and `γ`, the `counts[x]` subsystems sitting in state `x` move
//! independently with the row `P(γ(x))[x, ·]`, so their destination counts are
//! `Multinomial(counts[x], row)`. The next mean-field is the sum of these
//! independent count vectors over `x`. States are folded in ascending order,
//! which fixes the floating-point summation order.

use crate::error::{Error, Result};
use crate::model::{
    enumerate_mean_fields, ln_factorial, CoordinationMap, MeanField, MeanFieldSpace, ModelSpec,
    StochasticMatrix,
};

/// Kernel rows must sum to one within this tolerance; they are never renormalised.
pub const ROW_SUM_TOL: f64 = 1e-10;

/// Totals above this use log-space multinomial coefficients.
const EXACT_COEFFICIENT_LIMIT: usize = 20;

/// `P(z' | z, γ)` over `M_n` in rank order.
pub fn lift_kernel_row(
    model: &ModelSpec,
    z: &MeanField,
    map: &CoordinationMap,
    stage: usize,
) -> Result<Vec<f64>> {
    let target = model.mean_field_space();
    target.rank(z)?;
    let matrices = model.dynamics().matrices(z, stage);
    check_matrices(&matrices, model.k(), model.num_actions())?;
    let row = convolve_sources(&target, z, map, &matrices);
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > ROW_SUM_TOL {
        return Err(Error::Numeric(format!(
            "kernel row for z={z}, map={:?} sums to {sum}",
            map.assignment()
        )));
    }
    Ok(row)
}

fn check_matrices(matrices: &[StochasticMatrix], k: usize, num_actions: usize) -> Result<()> {
    if matrices.len() != num_actions || matrices.iter().any(|m| m.dim() != k) {
        return Err(Error::DimensionMismatch(format!(
            "dynamics returned {} matrices, expected {num_actions} of size {k}x{k}",
            matrices.len()
        )));
    }
    for (u, m) in matrices.iter().enumerate() {
        for x in 0..k {
            crate::model::check_distribution(m.row(x), &format!("transition[{u}][{x}]"))?;
        }
    }
    Ok(())
}

fn convolve_sources(
    target: &MeanFieldSpace,
    z: &MeanField,
    map: &CoordinationMap,
    matrices: &[StochasticMatrix],
) -> Vec<f64> {
    let k = target.k();
    // partial sum over the states folded so far, indexed by rank in M_total
    let mut acc_total = 0usize;
    let mut acc = vec![1.0];
    for x in 0..k {
        let m = z.count(x) as usize;
        if m == 0 {
            continue;
        }
        let row = matrices[map.action(x)].row(x);
        let part_fields = enumerate_mean_fields(m, k);
        let part = multinomial_pmf(m, row, &part_fields);
        let acc_space = MeanFieldSpace::new(acc_total, k);
        let next_space = MeanFieldSpace::new(acc_total + m, k);
        let mut next = vec![0.0; next_space.len()];
        let mut sum_counts = vec![0u32; k];
        for (a, &pa) in acc.iter().enumerate() {
            if pa == 0.0 {
                continue;
            }
            let a_counts = acc_space.fields()[a].counts();
            for (b, &pb) in part.iter().enumerate() {
                if pb == 0.0 {
                    continue;
                }
                for ((s, &ca), &cb) in sum_counts
                    .iter_mut()
                    .zip(a_counts)
                    .zip(part_fields[b].counts())
                {
                    *s = ca + cb;
                }
                next[next_space.rank_counts(&sum_counts)] += pa * pb;
            }
        }
        acc = next;
        acc_total += m;
    }
    debug_assert_eq!(acc.len(), target.len());
    acc
}

/// Multinomial PMF of `m` draws from `p`, evaluated at each of `fields`
/// (all compositions of `m`, in rank order).
pub fn multinomial_pmf(m: usize, p: &[f64], fields: &[MeanField]) -> Vec<f64> {
    let exact = m <= EXACT_COEFFICIENT_LIMIT;
    let ln_m = ln_factorial(m);
    fields
        .iter()
        .map(|c| {
            let counts = c.counts();
            if counts.iter().zip(p).any(|(&cj, &pj)| cj > 0 && pj == 0.0) {
                return 0.0;
            }
            if exact {
                let mut coef = 1.0;
                let mut placed = 0u32;
                for &cj in counts {
                    for j in 1..=cj {
                        coef = coef * f64::from(placed + j) / f64::from(j);
                    }
                    placed += cj;
                }
                counts
                    .iter()
                    .zip(p)
                    .fold(coef, |acc, (&cj, &pj)| acc * pj.powi(cj as i32))
            } else {
                let mut ln = ln_m;
                for (&cj, &pj) in counts.iter().zip(p) {
                    if cj > 0 {
                        ln += f64::from(cj) * pj.ln() - ln_factorial(cj as usize);
                    }
                }
                ln.exp()
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lifted::CostSpec;
    use crate::model::{Dynamics, Horizon};

    fn q() -> StochasticMatrix {
        StochasticMatrix::from_rows(&[vec![0.25, 0.75], vec![0.375, 0.625]]).unwrap()
    }

    fn model(n: usize, mats: Vec<StochasticMatrix>) -> ModelSpec {
        let k = mats[0].dim();
        ModelSpec::new(
            n,
            k,
            mats.len(),
            Dynamics::Homogeneous(mats),
            CostSpec::zero(),
            Horizon::Finite(1),
            vec![1.0 / k as f64; k],
        )
        .unwrap()
    }

    fn mf(c: &[u32]) -> MeanField {
        MeanField::new(c.to_vec()).unwrap()
    }

    #[test]
    fn single_subsystem_is_the_raw_row() {
        let m = model(1, vec![q()]);
        let row = lift_kernel_row(&m, &mf(&[1, 0]), &CoordinationMap::constant(2, 0), 0).unwrap();
        // ranks: (0,1) -> 0, (1,0) -> 1
        assert_eq!(row, vec![0.75, 0.25]);
    }

    #[test]
    fn two_subsystems_binomial() {
        let m = model(2, vec![q()]);
        let row = lift_kernel_row(&m, &mf(&[2, 0]), &CoordinationMap::constant(2, 0), 0).unwrap();
        // (0,2), (1,1), (2,0)
        let expected = [0.5625, 0.375, 0.0625];
        for (a, b) in row.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15, "{row:?}");
        }
    }

    #[test]
    fn deterministic_dynamics_give_dirac_rows() {
        // action 0 swaps the two states, action 1 stays put
        let swap = StochasticMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let m = model(5, vec![swap, StochasticMatrix::identity(2)]);
        let space = m.mean_field_space();
        let gamma = CoordinationMap::new(vec![0, 1], 2).unwrap();
        let row = lift_kernel_row(&m, &mf(&[3, 2]), &gamma, 0).unwrap();
        let image = space.rank(&mf(&[0, 5])).unwrap();
        for (i, p) in row.iter().enumerate() {
            assert_eq!(*p, if i == image { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn large_population_rows_are_stochastic() {
        let p1 = StochasticMatrix::mix(&StochasticMatrix::forcing(2, 0), &q(), 0.2).unwrap();
        let m = model(100, vec![q(), p1]);
        for z in m.mean_field_space().fields().iter().step_by(7) {
            for g in m.map_space().maps() {
                let row = lift_kernel_row(&m, z, g, 0).unwrap();
                assert!(row.iter().all(|&p| p >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn exact_and_log_coefficients_agree() {
        let p = [0.2, 0.3, 0.5];
        for m in [5, 20] {
            let fields = enumerate_mean_fields(m, 3);
            let exact = multinomial_pmf(m, &p, &fields);
            let logs: Vec<f64> = fields
                .iter()
                .map(|c| {
                    let cs = c.counts();
                    let mut ln = ln_factorial(m);
                    for (&cj, &pj) in cs.iter().zip(&p) {
                        ln += f64::from(cj) * pj.ln() - ln_factorial(cj as usize);
                    }
                    ln.exp()
                })
                .collect();
            for (a, b) in exact.iter().zip(&logs) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn multinomial_handles_zero_probabilities() {
        let fields = enumerate_mean_fields(3, 2);
        let pmf = multinomial_pmf(3, &[1.0, 0.0], &fields);
        assert_eq!(pmf, vec![0.0, 0.0, 0.0, 1.0]);
    }
}
