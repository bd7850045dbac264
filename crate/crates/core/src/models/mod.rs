//! The nine growth models, their beta priors, and seeded simulators.

mod history;
mod simulate;

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::autodiff::special::{beta_entropy, beta_log_density};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub use history::{History, Step};
pub(crate) use history::apply_step as apply_history_step;
pub use simulate::{ring_lattice, simulate};

/// Prior draws are kept this far from the boundary so beta log densities stay finite.
pub const BOUNDARY_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Redirection,
    DuplicationMutation,
    Copying,
    RandomConnection,
    ConnectedSmallWorld,
    GrowingTree,
    DuplicationComplementation,
    JacksonRogers,
    WattsStrogatz,
}

impl ModelKind {
    pub const ALL: [ModelKind; 9] = [
        ModelKind::Redirection,
        ModelKind::DuplicationMutation,
        ModelKind::Copying,
        ModelKind::RandomConnection,
        ModelKind::ConnectedSmallWorld,
        ModelKind::GrowingTree,
        ModelKind::DuplicationComplementation,
        ModelKind::JacksonRogers,
        ModelKind::WattsStrogatz,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Redirection => "redirection",
            ModelKind::DuplicationMutation => "duplication_mutation",
            ModelKind::Copying => "copying",
            ModelKind::RandomConnection => "random_connection",
            ModelKind::ConnectedSmallWorld => "connected_small_world",
            ModelKind::GrowingTree => "growing_tree",
            ModelKind::DuplicationComplementation => "duplication_complementation",
            ModelKind::JacksonRogers => "jackson_rogers",
            ModelKind::WattsStrogatz => "watts_strogatz",
        }
    }

    /// Whether edges are only ever added.
    pub fn is_monotonic(self) -> bool {
        !matches!(
            self,
            ModelKind::WattsStrogatz | ModelKind::DuplicationComplementation
        )
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownModel(s.to_string()))
    }
}

/// Comma-separated registry names, for error messages.
pub fn model_names() -> String {
    ModelKind::ALL.map(ModelKind::name).join(", ")
}

/// Independent Beta(α, β) priors, one per parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prior {
    pub concentrations: Vec<(f64, f64)>,
}

impl Prior {
    pub fn new(concentrations: Vec<(f64, f64)>) -> Result<Self> {
        if concentrations.iter().any(|&(a, b)| !(a > 0.0 && b > 0.0)) {
            return Err(Error::config("beta concentrations must be positive"));
        }
        Ok(Prior { concentrations })
    }

    pub fn len(&self) -> usize {
        self.concentrations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concentrations.is_empty()
    }

    pub fn sample(&self, rng: &mut Rng) -> ModelParams {
        ModelParams(
            self.concentrations
                .iter()
                .map(|&(a, b)| {
                    let x: f64 = Beta::new(a, b).expect("validated concentrations").sample(rng);
                    x.clamp(BOUNDARY_CLAMP, 1.0 - BOUNDARY_CLAMP)
                })
                .collect(),
        )
    }

    /// Sum of component log densities; `-inf` outside `(0, 1)^p`.
    pub fn log_density(&self, theta: &[f64]) -> f64 {
        if theta.len() != self.len() {
            return f64::NEG_INFINITY;
        }
        theta
            .iter()
            .zip(&self.concentrations)
            .map(|(&x, &(a, b))| beta_log_density(x, a, b))
            .sum()
    }

    /// Differential entropy in nats.
    pub fn entropy(&self) -> f64 {
        self.concentrations
            .iter()
            .map(|&(a, b)| beta_entropy(a, b))
            .sum()
    }
}

/// How the growth process is initialised.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialGraph {
    SingleNode,
    SingleEdge,
    Complete(usize),
    /// All `n` nodes on a ring, each tied to its `z` nearest neighbours.
    Ring,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Number of parameters.
    pub p: usize,
    /// Localization `k`; `None` for models that are not localized.
    pub k: Option<usize>,
    pub prior: Prior,
    pub initial: InitialGraph,
    /// Ring neighbours for the two ring models.
    pub z: usize,
    pub m_rnd: usize,
    pub m_nbr: usize,
}

impl ModelSpec {
    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    /// `2k + 1` for localized models.
    pub fn receptive_field(&self) -> Option<usize> {
        self.k.map(|k| 2 * k + 1)
    }

    /// Smallest `n` the simulator accepts.
    pub fn min_nodes(&self) -> usize {
        match self.initial {
            InitialGraph::SingleNode => 1,
            InitialGraph::SingleEdge => 2,
            InitialGraph::Complete(m) => m,
            // every node needs room for z ring edges plus shortcuts
            InitialGraph::Ring => 2 * self.z + 1,
        }
    }

    pub fn with_initial(mut self, initial: InitialGraph) -> Result<Self> {
        let allowed = match self.kind {
            ModelKind::Redirection | ModelKind::Copying => {
                matches!(initial, InitialGraph::SingleNode | InitialGraph::SingleEdge | InitialGraph::Complete(_))
            }
            _ => initial == self.initial,
        };
        if !allowed {
            return Err(Error::config(format!(
                "initial graph {initial:?} not supported for {}",
                self.kind
            )));
        }
        self.initial = initial;
        Ok(self)
    }

    pub fn sample_prior(&self, rng: &mut Rng) -> ModelParams {
        self.prior.sample(rng)
    }

    pub fn prior_log_density(&self, theta: &[f64]) -> f64 {
        self.prior.log_density(theta)
    }

    pub fn prior_entropy(&self) -> f64 {
        self.prior.entropy()
    }
}

/// Parameter vector `θ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams(pub Vec<f64>);

impl ModelParams {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Simulators accept the closed interval so that degenerate settings such
    /// as an unperturbed ring can be expressed.
    pub(crate) fn check(&self, spec: &ModelSpec) -> Result<()> {
        if self.0.len() != spec.p {
            return Err(Error::config(format!(
                "{} expects {} parameter(s), got {}",
                spec.kind,
                spec.p,
                self.0.len()
            )));
        }
        if let Some(x) = self.0.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(Error::config(format!("parameter {x} outside [0, 1]")));
        }
        Ok(())
    }
}

/// Canonical specification of a registered model.
pub fn registry(kind: ModelKind) -> ModelSpec {
    let beta = |a: f64, b: f64, p: usize| Prior {
        concentrations: vec![(a, b); p],
    };
    let (p, k, prior, initial) = match kind {
        ModelKind::Redirection => (1, Some(1), beta(2.0, 1.0, 1), InitialGraph::SingleNode),
        ModelKind::DuplicationMutation => (2, Some(1), beta(2.0, 2.0, 2), InitialGraph::SingleEdge),
        ModelKind::Copying => (1, Some(1), beta(2.0, 2.0, 1), InitialGraph::SingleNode),
        ModelKind::RandomConnection => (1, Some(0), beta(1.0, 1.0, 1), InitialGraph::SingleNode),
        ModelKind::ConnectedSmallWorld => (1, Some(0), beta(1.0, 1.0, 1), InitialGraph::Ring),
        ModelKind::GrowingTree => (1, None, beta(1.0, 1.0, 1), InitialGraph::SingleEdge),
        ModelKind::DuplicationComplementation => (2, None, beta(2.0, 2.0, 2), InitialGraph::SingleEdge),
        ModelKind::JacksonRogers => (2, None, beta(1.0, 1.0, 2), InitialGraph::Complete(21)),
        ModelKind::WattsStrogatz => (1, None, beta(1.0, 1.0, 1), InitialGraph::Ring),
    };
    ModelSpec {
        kind,
        p,
        k,
        prior,
        initial,
        z: 4,
        m_rnd: 10,
        m_nbr: 10,
    }
}

/// Looks a model up by its registry name.
pub fn registry_by_name(name: &str) -> Result<ModelSpec> {
    Ok(registry(name.parse()?))
}

/// Uniform draw of `amount` distinct values from `0..len`, in draw order.
pub(crate) fn sample_distinct(rng: &mut Rng, len: usize, amount: usize) -> Vec<usize> {
    rand::seq::index::sample(rng, len, amount.min(len)).into_vec()
}

pub(crate) fn coin(rng: &mut Rng, p: f64) -> bool {
    rng.random::<f64>() < p
}
