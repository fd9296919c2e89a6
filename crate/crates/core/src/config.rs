//! TOML model files.
//!
//! ```toml
//! n = 100
//! k = 2
//! actions = 3
//! init_dist = ["1/3", "2/3"]
//!
//! [transition]
//! type = "forcing"
//! natural = [[0.25, 0.75], [0.375, 0.625]]
//! epsilon = [0.2, 0.2]
//!
//! [cost]
//! type = "exchangeable-smartgrid"
//! action_costs = [0.0, 0.1, 0.2]
//! reference = [0.7, 0.3]
//!
//! [horizon]
//! type = "discounted"
//! beta = 0.9
//! ```
//!
//! Transitions are `matrices` (one per action), `staged` (one list per stage)
//! or `forcing`, where action 0 follows `natural` and action `u ≥ 1` is
//! `(1 − ε_u) K_u + ε_u · natural` with `K_u` sending every state to `u − 1`.
//!
//! Costs are `exchangeable-smartgrid`, `general` (a table over joint
//! state-action indices, see [`joint_cost_index`]) or `custom-expression`,
//! an arithmetic expression over `n`, `z_x` (fraction in state `x`),
//! `m_x` (count in state `x`), `u_x` (action prescribed in state `x`) and
//! `a_u` (fraction of subsystems playing `u`). Literals are integers unless
//! written with a decimal point.
//!
//! An optional `[observation]` section declares the channel for
//! `solve-pomdp`: `noiseless`, `uninformative`, `table` (rows over mean-field
//! ranks) or `count-noise` (count of `state` plus a centred offset).

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use evalexpr::{
    build_operator_tree, ContextWithMutableVariables, DefaultNumericTypes, HashMapContext, Node,
    Value,
};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lifted::{CostSpec, GeneralCost, PermutationSampling, SmartGridCost};
use crate::model::{CoordinationMap, Dynamics, Horizon, MeanField, ModelSpec, StochasticMatrix};
use crate::models::forcing_dynamics;
use crate::pomdp::ObservationChannel;

/// A probability written as a number or as an `"a/b"` string.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Prob {
    Number(f64),
    Text(String),
}

impl Prob {
    fn value(&self, path: &str) -> Result<f64> {
        match self {
            Prob::Number(v) => Ok(*v),
            Prob::Text(s) => {
                let parse = |t: &str| {
                    t.trim().parse::<f64>().map_err(|_| {
                        Error::invalid(path, format!("cannot read `{s}` as a probability"))
                    })
                };
                match s.split_once('/') {
                    Some((a, b)) => Ok(parse(a)? / parse(b)?),
                    None => parse(s),
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n: usize,
    pub k: usize,
    pub actions: usize,
    pub init_dist: Vec<Prob>,
    pub transition: TransitionConfig,
    pub cost: CostConfig,
    pub horizon: HorizonConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observation: Option<ObservationConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TransitionConfig {
    Matrices {
        matrices: Vec<Vec<Vec<f64>>>,
    },
    Staged {
        stages: Vec<Vec<Vec<Vec<f64>>>>,
    },
    Forcing {
        natural: Vec<Vec<f64>>,
        epsilon: Vec<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CostConfig {
    ExchangeableSmartgrid {
        action_costs: Vec<f64>,
        reference: Vec<f64>,
    },
    General {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        table: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        stages: Option<Vec<Vec<f64>>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        enumeration_budget: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        samples: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    CustomExpression {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        expression: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        stages: Option<Vec<String>>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum HorizonConfig {
    Finite { stages: usize },
    Discounted { beta: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ObservationConfig {
    Noiseless,
    Uninformative,
    Table { table: Vec<Vec<f64>> },
    CountNoise { state: usize, offsets: Vec<f64> },
}

/// A parsed model file.
#[derive(Clone, Debug)]
pub struct LoadedModel {
    pub spec: ModelSpec,
    pub channel: Option<ObservationChannel>,
    /// The file in canonical form: probabilities as numbers, forcing
    /// shorthand expanded to explicit matrices.
    pub normalized: ModelConfig,
}

pub fn load_model(path: impl AsRef<Path>) -> Result<LoadedModel> {
    let path = path.as_ref();
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::invalid(path.display().to_string(), e))?;
    parse_model(&text)
}

pub fn parse_model(text: &str) -> Result<LoadedModel> {
    let config: ModelConfig =
        toml::from_str(text).map_err(|e| Error::invalid(locate(text, &e), e.message()))?;
    config.build()
}

fn locate(text: &str, e: &toml::de::Error) -> String {
    let Some(span) = e.span() else {
        return "config".into();
    };
    let before = &text[..span.start.min(text.len())];
    let line = before.matches('\n').count() + 1;
    // nearest [section] header, looking through the span's first line
    let upto = text[span.start..]
        .find('\n')
        .map_or(text.len(), |i| span.start + i);
    let section = text[..upto.max(span.start).min(text.len())]
        .lines()
        .rev()
        .find_map(|l| l.trim().strip_prefix('[').and_then(|r| r.strip_suffix(']')));
    match section {
        Some(s) => format!("{s} (line {line})"),
        None => format!("line {line}"),
    }
}

impl ModelConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config types serialise")
    }

    pub fn build(&self) -> Result<LoadedModel> {
        let init: Vec<f64> = self
            .init_dist
            .iter()
            .enumerate()
            .map(|(i, p)| p.value(&format!("init_dist[{i}]")))
            .collect::<Result<_>>()?;
        let (dynamics, transition) = self.build_transition()?;
        let horizon = match self.horizon {
            HorizonConfig::Finite { stages } => Horizon::Finite(stages),
            HorizonConfig::Discounted { beta } => Horizon::Discounted(beta),
        };
        let cost = self.build_cost()?;
        let spec = ModelSpec::new(
            self.n,
            self.k,
            self.actions,
            dynamics,
            cost,
            horizon,
            init.clone(),
        )?;
        let channel = match &self.observation {
            None => None,
            Some(obs) => Some(build_channel(obs, &spec)?),
        };
        let normalized = ModelConfig {
            init_dist: init.into_iter().map(Prob::Number).collect(),
            transition,
            ..self.clone()
        };
        Ok(LoadedModel {
            spec,
            channel,
            normalized,
        })
    }

    fn build_transition(&self) -> Result<(Dynamics, TransitionConfig)> {
        let mats = |list: &[Vec<Vec<f64>>], path: &str| -> Result<Vec<StochasticMatrix>> {
            list.iter()
                .enumerate()
                .map(|(u, rows)| StochasticMatrix::from_rows_at(rows, &format!("{path}[{u}]")))
                .collect()
        };
        match &self.transition {
            TransitionConfig::Matrices { matrices } => Ok((
                Dynamics::Homogeneous(mats(matrices, "transition.matrices")?),
                self.transition.clone(),
            )),
            TransitionConfig::Staged { stages } => {
                let built = stages
                    .iter()
                    .enumerate()
                    .map(|(t, s)| mats(s, &format!("transition.stages[{t}]")))
                    .collect::<Result<Vec<_>>>()?;
                Ok((Dynamics::Staged(built), self.transition.clone()))
            }
            TransitionConfig::Forcing { natural, epsilon } => {
                let q = StochasticMatrix::from_rows_at(natural, "transition.natural")?;
                if epsilon.len() + 1 != self.actions {
                    return Err(Error::invalid(
                        "transition.epsilon",
                        format!(
                            "{} weights for {} forcing actions",
                            epsilon.len(),
                            self.actions.saturating_sub(1)
                        ),
                    ));
                }
                if q.dim() < epsilon.len() {
                    return Err(Error::invalid(
                        "transition.epsilon",
                        format!(
                            "{} forcing actions but only {} states",
                            epsilon.len(),
                            q.dim()
                        ),
                    ));
                }
                if let Some(i) = epsilon.iter().position(|e| !(0.0..=1.0).contains(e)) {
                    return Err(Error::invalid(
                        format!("transition.epsilon[{i}]"),
                        "must lie in [0, 1]",
                    ));
                }
                let built = forcing_dynamics(&q, epsilon)?;
                let expanded = TransitionConfig::Matrices {
                    matrices: built.iter().map(StochasticMatrix::rows).collect(),
                };
                Ok((Dynamics::Homogeneous(built), expanded))
            }
        }
    }

    fn build_cost(&self) -> Result<CostSpec> {
        match &self.cost {
            CostConfig::ExchangeableSmartgrid {
                action_costs,
                reference,
            } => Ok(CostSpec::SmartGrid(SmartGridCost::new(
                action_costs.clone(),
                reference.clone(),
            )?)),
            CostConfig::General {
                table,
                stages,
                enumeration_budget,
                samples,
                seed,
            } => {
                let wrap = |t: &[f64], path: String| -> Result<CostSpec> {
                    let expected = (self.k * self.actions)
                        .checked_pow(self.n as u32)
                        .ok_or_else(|| {
                            Error::invalid(&path, "joint table would not fit in memory")
                        })?;
                    if t.len() != expected {
                        return Err(Error::invalid(
                            path,
                            format!("{} entries, expected (k·actions)^n = {expected}", t.len()),
                        ));
                    }
                    if let Some(i) = t.iter().position(|v| !v.is_finite()) {
                        return Err(Error::invalid(format!("{path}[{i}]"), "not finite"));
                    }
                    let table = t.to_vec();
                    let (k, a) = (self.k, self.actions);
                    let mut g = GeneralCost::new(Arc::new(move |x: &[usize], u: &[usize]| {
                        table[joint_cost_index(x, u, k, a)]
                    }));
                    if let Some(b) = enumeration_budget {
                        g = g.with_budget(*b);
                    }
                    if let Some(s) = samples {
                        g = g.with_sampling(PermutationSampling {
                            samples: *s,
                            seed: seed.unwrap_or(0),
                        });
                    }
                    Ok(CostSpec::General(g))
                };
                match (table, stages) {
                    (Some(t), None) => wrap(t, "cost.table".into()),
                    (None, Some(s)) => Ok(CostSpec::Staged(
                        s.iter()
                            .enumerate()
                            .map(|(i, t)| wrap(t, format!("cost.stages[{i}]")))
                            .collect::<Result<_>>()?,
                    )),
                    _ => Err(Error::invalid(
                        "cost",
                        "give exactly one of `table` or `stages`",
                    )),
                }
            }
            CostConfig::CustomExpression { expression, stages } => match (expression, stages) {
                (Some(e), None) => expression_cost(e, "cost.expression", self.k, self.actions),
                (None, Some(s)) => Ok(CostSpec::Staged(
                    s.iter()
                        .enumerate()
                        .map(|(i, e)| {
                            expression_cost(e, &format!("cost.stages[{i}]"), self.k, self.actions)
                        })
                        .collect::<Result<_>>()?,
                )),
                _ => Err(Error::invalid(
                    "cost",
                    "give exactly one of `expression` or `stages`",
                )),
            },
        }
    }
}

/// Index of `(x, u)` in a general cost table: per subsystem the digit
/// `x^i · actions + u^i`, base `k · actions`, subsystem 0 least significant.
pub fn joint_cost_index(x: &[usize], u: &[usize], k: usize, actions: usize) -> usize {
    x.iter()
        .zip(u)
        .rev()
        .fold(0, |acc, (&xi, &ui)| acc * k * actions + xi * actions + ui)
}

struct Expression {
    source: String,
    tree: Node<DefaultNumericTypes>,
}

impl fmt::Debug for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

impl Expression {
    fn try_eval(
        &self,
        z: &MeanField,
        map: &CoordinationMap,
        actions: usize,
    ) -> evalexpr::EvalexprResult<f64, DefaultNumericTypes> {
        let mut ctx = HashMapContext::<DefaultNumericTypes>::new();
        let n = f64::from(z.n());
        ctx.set_value("n".into(), Value::Float(n))?;
        let mut played = vec![0.0; actions];
        for (x, &c) in z.counts().iter().enumerate() {
            ctx.set_value(format!("z_{x}"), Value::Float(f64::from(c) / n))?;
            ctx.set_value(format!("m_{x}"), Value::Float(f64::from(c)))?;
            ctx.set_value(format!("u_{x}"), Value::Float(map.action(x) as f64))?;
            if let Some(p) = played.get_mut(map.action(x)) {
                *p += f64::from(c) / n;
            }
        }
        for (u, p) in played.into_iter().enumerate() {
            ctx.set_value(format!("a_{u}"), Value::Float(p))?;
        }
        self.tree.eval_number_with_context(&ctx)
    }
}

fn expression_cost(source: &str, path: &str, k: usize, actions: usize) -> Result<CostSpec> {
    let tree =
        build_operator_tree::<DefaultNumericTypes>(source).map_err(|e| Error::invalid(path, e))?;
    let expr = Expression {
        source: source.to_string(),
        tree,
    };
    // unknown variables and type errors surface at load time
    expr.try_eval(
        &MeanField::dirac(1, k, 0),
        &CoordinationMap::constant(k, 0),
        actions,
    )
    .map_err(|e| Error::invalid(path, e))?;
    Ok(CostSpec::exchangeable(move |z, map| {
        expr.try_eval(z, map, actions).unwrap_or(f64::NAN)
    }))
}

fn build_channel(obs: &ObservationConfig, spec: &ModelSpec) -> Result<ObservationChannel> {
    let space = spec.mean_field_space();
    match obs {
        ObservationConfig::Noiseless => Ok(ObservationChannel::noiseless(space.len())),
        ObservationConfig::Uninformative => Ok(ObservationChannel::uninformative(space.len())),
        ObservationConfig::Table { table } => {
            if table.len() != space.len() {
                return Err(Error::invalid(
                    "observation.table",
                    format!("{} rows for {} mean-fields", table.len(), space.len()),
                ));
            }
            ObservationChannel::from_table(table)
        }
        ObservationConfig::CountNoise { state, offsets } => {
            ObservationChannel::count_noise(&space, *state, offsets)
        }
    }
}
