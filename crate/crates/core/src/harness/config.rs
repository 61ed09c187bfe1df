//! Experiment configuration files.
//!
//! Configurations are TOML documents. Every field has a default, so an empty
//! file is a valid experiment; `--set path=value` overrides apply to the
//! parsed document before it is checked.

use serde::{Deserialize, Serialize};

use crate::data::FederationSpec;
use crate::fedmethods::Target;
use crate::hyperspace::{Dimension, DimensionKind, Partition, Scale, SearchSpace};
use crate::models::{Activation, Architecture};
use crate::oco::{Feedback, LossFamily};
use crate::tuners::fedex::StepSchedule;
use crate::tuners::schedule::{compute_schedule, EliminationSchedule};
use crate::tuners::sha::{FedExSettings, InnerTuner, ShaSettings};

/// One violated field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Issue {
    pub field: String,
    pub message: String,
}

impl Issue {
    fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Tuner {
    #[serde(rename = "rs")]
    Rs,
    #[serde(rename = "sha")]
    Sha,
    #[serde(rename = "rs+fedex")]
    RsFedEx,
    #[serde(rename = "sha+fedex")]
    ShaFedEx,
}

impl Tuner {
    pub fn as_str(self) -> &'static str {
        match self {
            Tuner::Rs => "rs",
            Tuner::Sha => "sha",
            Tuner::RsFedEx => "rs+fedex",
            Tuner::ShaFedEx => "sha+fedex",
        }
    }

    pub fn uses_fedex(self) -> bool {
        matches!(self, Tuner::RsFedEx | Tuner::ShaFedEx)
    }

    /// The same wrapper without FedEx.
    pub fn plain(self) -> Self {
        match self {
            Tuner::Rs | Tuner::RsFedEx => Tuner::Rs,
            Tuner::Sha | Tuner::ShaFedEx => Tuner::Sha,
        }
    }
}

/// The federated method being tuned. It only decides the default search
/// space: FedAvg and FedProx aggregate with a unit server step, FedProx adds
/// the proximal weight `mu`, and Reptile also tunes the server step,
/// momentum and decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Fedavg,
    Fedprox,
    Reptile,
}

impl Method {
    pub fn default_space(self) -> SearchSpace {
        let base = SearchSpace::default_federated();
        let mut dims: Vec<Dimension> = base
            .dimensions()
            .iter()
            .filter(|d| self == Method::Reptile || d.partition == Partition::Client)
            .cloned()
            .collect();
        if self == Method::Fedprox {
            dims.push(Dimension::continuous("mu", Partition::Client, -5.0, 0.0, Scale::Log10));
        }
        SearchSpace::new(dims).expect("method spaces are valid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelChoice {
    Linear,
    Logistic,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub kind: ModelChoice,
    /// Hidden width for `mlp`.
    pub hidden: usize,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelChoice::Logistic,
            hidden: 16,
            activation: Activation::Relu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BudgetConfig {
    /// Communication rounds for a whole sweep.
    pub total_rounds: usize,
    /// Rounds the final survivor trains for.
    pub max_per_arm: usize,
    /// SHA elimination rate.
    pub eta: usize,
    /// SHA elimination rounds.
    pub elimination_rounds: usize,
    /// Number of arms for random search.
    pub rs_arms: usize,
    /// Discount of past rounds in elimination scores; 0 uses the last round.
    pub elimination_discount: f64,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self {
            total_rounds: 600,
            max_per_arm: 120,
            eta: 3,
            elimination_rounds: 3,
            rs_arms: 27,
            elimination_discount: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FedExConfig {
    pub k: usize,
    pub epsilon: f64,
    pub schedule: StepSchedule,
    /// Baseline discount.
    pub discount: f64,
}

impl Default for FedExConfig {
    fn default() -> Self {
        let d = FedExSettings::default();
        Self {
            k: d.k,
            epsilon: d.epsilon,
            schedule: d.schedule,
            discount: d.discount,
        }
    }
}

impl FedExConfig {
    pub fn settings(&self) -> FedExSettings {
        FedExSettings {
            k: self.k,
            epsilon: self.epsilon,
            schedule: self.schedule,
            discount: self.discount,
        }
    }
}

/// Axes of an ablation sweep; empty axes are not swept.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub epsilon: Vec<f64>,
    pub schedule: Vec<StepSchedule>,
    /// Elimination discounts.
    pub discount: Vec<f64>,
}

impl AblationConfig {
    pub fn is_empty(&self) -> bool {
        self.epsilon.is_empty() && self.schedule.is_empty() && self.discount.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: String,
    /// Also write one row per arm per round.
    pub trace: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: "out".into(),
            trace: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    pub tuner: Tuner,
    pub method: Method,
    pub target: Target,
    pub clients_per_round: usize,
    pub federation: FederationSpec,
    pub model: ModelConfig,
    /// Replaces the method's default space when given.
    pub search_space: Option<Vec<Dimension>>,
    pub budget: BudgetConfig,
    /// Defaults apply when the tuner uses FedEx and the table is absent.
    pub fedex: Option<FedExConfig>,
    pub ablation: AblationConfig,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            seeds: vec![0],
            tuner: Tuner::ShaFedEx,
            method: Method::Reptile,
            target: Target::Personalized,
            clients_per_round: 10,
            federation: FederationSpec::default(),
            model: ModelConfig::default(),
            search_space: None,
            budget: BudgetConfig::default(),
            fedex: None,
            ablation: AblationConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, Vec<Issue>> {
        parse_with_overrides(text, &[])
    }

    pub fn space(&self) -> Result<SearchSpace, crate::Error> {
        match &self.search_space {
            Some(dims) => SearchSpace::new(dims.clone()),
            None => Ok(self.method.default_space()),
        }
    }

    pub fn architecture(&self) -> Architecture {
        let d = self.federation.feature_dim;
        let c = self.federation.classes;
        match self.model.kind {
            ModelChoice::Linear => Architecture::linear(d),
            ModelChoice::Logistic => Architecture::logistic(d, c.max(2)),
            ModelChoice::Mlp => Architecture::mlp(d, self.model.hidden, c.max(1), self.model.activation),
        }
    }

    pub fn fedex_config(&self) -> FedExConfig {
        self.fedex.clone().unwrap_or_default()
    }

    /// The schedule `tuner` runs under this budget; random search is a
    /// single elimination over `rs_arms` arms.
    pub fn schedule_for(&self, tuner: Tuner) -> Result<EliminationSchedule, crate::Error> {
        let b = &self.budget;
        match tuner {
            Tuner::Rs | Tuner::RsFedEx => EliminationSchedule::random_search(b.rs_arms, b.total_rounds, b.max_per_arm),
            Tuner::Sha | Tuner::ShaFedEx => compute_schedule(b.eta, b.elimination_rounds, b.total_rounds, b.max_per_arm),
        }
    }

    pub fn inner_for(&self, tuner: Tuner) -> InnerTuner {
        if tuner.uses_fedex() {
            InnerTuner::FedEx(self.fedex_config().settings())
        } else {
            InnerTuner::Plain
        }
    }

    pub fn sha_settings(&self) -> ShaSettings {
        ShaSettings {
            clients_per_round: self.clients_per_round,
            target: self.target,
            elimination_discount: self.budget.elimination_discount,
            trace: self.output.trace,
        }
    }

    /// Every violated field, in a stable order.
    pub fn issues(&self) -> Vec<Issue> {
        let mut out = Vec::new();
        if self.seeds.is_empty() {
            out.push(Issue::new("seeds", "at least one seed is required"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            out.push(Issue::new("seeds", "seeds must be distinct"));
        }
        out.extend(self.federation.issues().into_iter().map(|(f, m)| Issue::new(f, m)));
        if self.clients_per_round == 0 {
            out.push(Issue::new("clients_per_round", "must be at least 1"));
        } else if self.clients_per_round > self.federation.clients && self.federation.clients > 0 {
            out.push(Issue::new(
                "clients_per_round",
                format!("{} exceeds the {} clients available", self.clients_per_round, self.federation.clients),
            ));
        }
        let regression = self.federation.is_regression();
        match self.model.kind {
            ModelChoice::Linear if !regression => {
                out.push(Issue::new("model.kind", "linear models need a regression federation (classes = 0)"))
            }
            ModelChoice::Logistic if regression => {
                out.push(Issue::new("model.kind", "logistic models need classes >= 2"))
            }
            ModelChoice::Mlp if self.model.hidden == 0 => out.push(Issue::new("model.hidden", "must be at least 1")),
            _ => {}
        }
        match self.space() {
            Err(e) => out.push(Issue::new("search_space", e.to_string())),
            Ok(space) => out.extend(space_issues(&space)),
        }
        if let Err(e) = self.schedule_for(self.tuner) {
            out.push(Issue::new("budget", e.to_string()));
        }
        if !(0.0..=1.0).contains(&self.budget.elimination_discount) {
            out.push(Issue::new("budget.elimination_discount", "must lie in [0, 1]"));
        }
        if self.fedex.is_some() && !self.tuner.uses_fedex() {
            out.push(Issue::new(
                "fedex",
                format!("FedEx settings given but tuner `{}` does not use FedEx", self.tuner.as_str()),
            ));
        }
        let fx = self.fedex_config();
        if fx.k == 0 {
            out.push(Issue::new("fedex.k", "must be at least 1"));
        }
        if !(fx.epsilon >= 0.0 && fx.epsilon.is_finite()) {
            out.push(Issue::new("fedex.epsilon", "must be a finite number >= 0"));
        }
        if !(0.0..=1.0).contains(&fx.discount) {
            out.push(Issue::new("fedex.discount", "must lie in [0, 1]"));
        }
        if (!self.ablation.epsilon.is_empty() || !self.ablation.schedule.is_empty()) && !self.tuner.uses_fedex() {
            out.push(Issue::new(
                "ablation",
                format!("epsilon and schedule sweeps need a FedEx tuner, not `{}`", self.tuner.as_str()),
            ));
        }
        if self.ablation.epsilon.iter().any(|e| !(*e >= 0.0 && e.is_finite())) {
            out.push(Issue::new("ablation.epsilon", "values must be finite and >= 0"));
        }
        if self.ablation.discount.iter().any(|d| !(0.0..=1.0).contains(d)) {
            out.push(Issue::new("ablation.discount", "values must lie in [0, 1]"));
        }
        if self.output.dir.is_empty() {
            out.push(Issue::new("output.dir", "must not be empty"));
        }
        out
    }
}

/// Names local training and aggregation understand; anything else in the
/// search space would be sampled and then silently ignored.
const KNOWN: &[&str] = &[
    "server_lr",
    "server_momentum",
    "server_decay",
    "lr",
    "momentum",
    "weight_decay",
    "epochs",
    "batch",
    "dropout",
    "mu",
];

fn space_issues(space: &SearchSpace) -> Vec<Issue> {
    let mut out = Vec::new();
    for d in space.dimensions() {
        let field = format!("search_space.{}", d.name);
        if !KNOWN.contains(&d.name.as_str()) {
            out.push(Issue::new(&field, format!("unknown hyperparameter; expected one of {}", KNOWN.join(", "))));
            continue;
        }
        let server = d.name.starts_with("server_");
        let expected = if server { Partition::Server } else { Partition::Client };
        if d.partition != expected {
            out.push(Issue::new(&field, format!("belongs to the {expected:?} partition").to_lowercase()));
        }
        if let DimensionKind::Categorical { .. } = d.kind {
            out.push(Issue::new(&field, "numeric hyperparameters cannot be categorical"));
        }
    }
    out
}

/// Applies dotted `path=value` overrides to a TOML document, then
/// deserializes it. Values are parsed as TOML and fall back to strings.
pub fn parse_with_overrides<T: serde::de::DeserializeOwned>(text: &str, overrides: &[String]) -> Result<T, Vec<Issue>> {
    let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| vec![Issue::new("<document>", e.to_string())])?;
    for o in overrides {
        let Some((path, raw)) = o.split_once('=') else {
            return Err(vec![Issue::new(o.as_str(), "override must look like path=value")]);
        };
        let value = parse_value(raw.trim());
        let keys: Vec<&str> = path.trim().split('.').collect();
        let mut table = &mut doc;
        for key in &keys[..keys.len() - 1] {
            let entry = table
                .entry(key.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            table = match entry {
                toml::Value::Table(t) => t,
                _ => return Err(vec![Issue::new(path, format!("`{key}` is not a table"))]),
            };
        }
        table.insert(keys[keys.len() - 1].to_string(), value);
    }
    T::deserialize(toml::Value::Table(doc)).map_err(|e| vec![Issue::new("<document>", e.to_string().trim().to_string())])
}

fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key was just parsed"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Online-convex-optimization experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OcoConfig {
    pub seeds: Vec<u64>,
    pub family: LossFamily,
    pub dim: usize,
    pub diameter: f64,
    /// Losses per task.
    pub m: usize,
    /// Horizons to run.
    pub taus: Vec<usize>,
    /// Grid size; 0 picks it from the horizon.
    pub k: usize,
    pub modes: Vec<Feedback>,
    /// Radius of the ball task centers are drawn from.
    pub dispersion: f64,
    /// Radius of the within-task target noise.
    pub noise: f64,
    pub output: OutputConfig,
}

impl Default for OcoConfig {
    fn default() -> Self {
        Self {
            seeds: (0..20).collect(),
            family: LossFamily::Quadratic,
            dim: 5,
            diameter: 2.0,
            m: 50,
            taus: vec![10, 100, 1000],
            k: 0,
            modes: vec![Feedback::Bandit],
            dispersion: 0.0,
            noise: 0.0,
            output: OutputConfig::default(),
        }
    }
}

impl OcoConfig {
    pub fn issues(&self) -> Vec<Issue> {
        let mut out = Vec::new();
        if self.seeds.is_empty() {
            out.push(Issue::new("seeds", "at least one seed is required"));
        }
        if self.dim == 0 {
            out.push(Issue::new("dim", "must be at least 1"));
        }
        if !(self.diameter > 0.0 && self.diameter.is_finite()) {
            out.push(Issue::new("diameter", "must be positive"));
        }
        if self.m == 0 {
            out.push(Issue::new("m", "must be at least 1"));
        }
        if self.taus.is_empty() || self.taus.contains(&0) {
            out.push(Issue::new("taus", "need at least one positive horizon"));
        }
        if self.modes.is_empty() {
            out.push(Issue::new("modes", "need at least one feedback mode"));
        }
        if !(self.dispersion >= 0.0 && self.dispersion <= self.diameter / 2.0) {
            out.push(Issue::new("dispersion", "must lie in [0, diameter / 2]"));
        }
        if !(self.noise >= 0.0 && self.noise <= self.diameter / 2.0) {
            out.push(Issue::new("noise", "must lie in [0, diameter / 2]"));
        }
        if self.output.dir.is_empty() {
            out.push(Issue::new("output.dir", "must not be empty"));
        }
        out
    }
}
