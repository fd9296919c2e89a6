use std::io::Write;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::lifted::{lift_cost, lift_kernel_row};
use crate::model::{MapSpace, MeanFieldSpace, ModelSpec};

/// Default cap on the (upper-bound) memory needed by the lifted tables.
pub const DEFAULT_MEMORY_BUDGET: u128 = 4 << 30;

/// Sparse kernel entry: `(rank of z', probability)`.
pub type KernelEntry = (u32, f64);

/// Cost and kernel for one stage, indexed by `rank(z) * |maps| + map_index`.
#[derive(Clone, Debug, PartialEq)]
pub struct StageTables {
    num_maps: usize,
    costs: Vec<f64>,
    rows: Vec<Vec<KernelEntry>>,
}

impl StageTables {
    pub fn cost(&self, z: usize, map: usize) -> f64 {
        self.costs[z * self.num_maps + map]
    }

    /// Nonzero entries of `P(· | z, γ)`, ascending in rank.
    pub fn row(&self, z: usize, map: usize) -> &[KernelEntry] {
        &self.rows[z * self.num_maps + map]
    }

    pub fn num_maps(&self) -> usize {
        self.num_maps
    }

    pub fn num_states(&self) -> usize {
        self.costs.len() / self.num_maps
    }

    /// `Σ_z' P(z' | z, γ) v(z')`, summed in rank order.
    pub fn expect(&self, z: usize, map: usize, v: &[f64]) -> f64 {
        self.row(z, map)
            .iter()
            .map(|&(j, p)| p * v[j as usize])
            .sum()
    }

    pub fn max_abs_cost(&self) -> f64 {
        self.costs.iter().fold(0.0, |m, c| m.max(c.abs()))
    }
}

/// The coordinator's MDP over `M_n`: per-stage cost `ĥℓ_t(z, γ)` and kernel
/// `P(z' | z, γ)` for every pair.
#[derive(Clone, Debug)]
pub struct LiftedMdp {
    space: MeanFieldSpace,
    maps: MapSpace,
    stages: Vec<Arc<StageTables>>,
    /// `true` when one table serves every stage.
    shared: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct BuildOptions {
    pub exec: Execution,
    pub memory_budget: u128,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            exec: Execution::default(),
            memory_budget: DEFAULT_MEMORY_BUDGET,
        }
    }
}

pub fn build_lifted_mdp(model: &ModelSpec) -> Result<LiftedMdp> {
    build_lifted_mdp_with(model, BuildOptions::default())
}

pub fn build_lifted_mdp_with(model: &ModelSpec, options: BuildOptions) -> Result<LiftedMdp> {
    let space = model.mean_field_space();
    let maps = model.map_space();
    let shared = model.is_time_homogeneous();
    let distinct = if shared { 1 } else { model.stage_count() };

    let pairs = space.len() as u128 * maps.len() as u128;
    let entry = std::mem::size_of::<KernelEntry>() as u128;
    let required = distinct as u128 * pairs * (space.len() as u128 * entry + 8);
    if required > options.memory_budget {
        return Err(Error::BudgetExceeded {
            what: "lifted MDP tables (bytes)",
            required,
            budget: options.memory_budget,
        });
    }

    let mut stages = Vec::with_capacity(distinct);
    for stage in 0..distinct {
        stages.push(Arc::new(build_stage(
            model,
            &space,
            &maps,
            stage,
            options.exec,
        )?));
    }
    Ok(LiftedMdp {
        space,
        maps,
        stages,
        shared,
    })
}

fn build_stage(
    model: &ModelSpec,
    space: &MeanFieldSpace,
    maps: &MapSpace,
    stage: usize,
    exec: Execution,
) -> Result<StageTables> {
    let num_maps = maps.len();
    let cells = exec.try_map_range(space.len() * num_maps, |i| {
        let z = &space.fields()[i / num_maps];
        let map = &maps.maps()[i % num_maps];
        let cost = lift_cost(model, z, map, stage)?.value;
        let row = lift_kernel_row(model, z, map, stage)?
            .into_iter()
            .enumerate()
            .filter(|&(_, p)| p != 0.0)
            .map(|(j, p)| (j as u32, p))
            .collect::<Vec<_>>();
        Ok::<_, Error>((cost, row))
    })?;
    let (costs, rows) = cells.into_iter().unzip();
    Ok(StageTables {
        num_maps,
        costs,
        rows,
    })
}

impl LiftedMdp {
    pub fn space(&self) -> &MeanFieldSpace {
        &self.space
    }

    pub fn maps(&self) -> &MapSpace {
        &self.maps
    }

    pub fn num_states(&self) -> usize {
        self.space.len()
    }

    pub fn num_maps(&self) -> usize {
        self.maps.len()
    }

    /// Tables for `stage`; time-homogeneous models share one table.
    pub fn stage(&self, stage: usize) -> Result<&StageTables> {
        let idx = if self.shared { 0 } else { stage };
        self.stages.get(idx).map(Arc::as_ref).ok_or_else(|| {
            Error::DimensionMismatch(format!(
                "no lifted tables for stage {stage} ({} built)",
                self.stages.len()
            ))
        })
    }

    pub fn is_shared(&self) -> bool {
        self.shared
    }

    /// Number of distinct stage tables.
    pub fn table_count(&self) -> usize {
        self.stages.len()
    }

    /// Writes `z_rank,map_index,next_rank,probability` for one stage table.
    pub fn write_kernel_csv<W: Write>(&self, stage: usize, out: W) -> Result<()> {
        let tables = self.stage(stage)?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["z_rank", "map_index", "next_rank", "probability"])?;
        for z in 0..self.num_states() {
            for g in 0..self.num_maps() {
                for &(j, p) in tables.row(z, g) {
                    w.write_record([z.to_string(), g.to_string(), j.to_string(), p.to_string()])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `z_rank,map_index,cost` for one stage table.
    pub fn write_cost_csv<W: Write>(&self, stage: usize, out: W) -> Result<()> {
        let tables = self.stage(stage)?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["z_rank", "map_index", "cost"])?;
        for z in 0..self.num_states() {
            for g in 0..self.num_maps() {
                w.write_record([z.to_string(), g.to_string(), tables.cost(z, g).to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}
