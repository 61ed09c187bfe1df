//! Hyperparameter search spaces.
//!
//! A [`SearchSpace`] is a list of named dimensions, each owned either by the
//! server (aggregation) or by the clients (local training). Sampled points are
//! stored in *sampling coordinates*: exponents for log-scaled dimensions and
//! positions for discrete or categorical ones. Decoding to the value a trainer
//! consumes happens through [`SearchSpace::real`].

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How a continuous coordinate maps to the hyperparameter value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    /// value = x
    #[default]
    Linear,
    /// value = 10^x
    Log10,
    /// value = 1 - 10^x, used for decay factors close to one
    Log10Complement,
}

impl Scale {
    pub fn decode(self, x: f64) -> f64 {
        match self {
            Scale::Linear => x,
            Scale::Log10 => 10f64.powf(x),
            Scale::Log10Complement => 1.0 - 10f64.powf(x),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DimensionKind {
    /// Uniform over `[lo, hi]` in coordinate space.
    Continuous {
        lo: f64,
        hi: f64,
        #[serde(default)]
        scale: Scale,
    },
    /// Ordered numeric values, sampled and perturbed by position.
    Discrete { values: Vec<f64> },
    /// Unordered labels.
    Categorical { labels: Vec<String> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Server,
    Client,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dimension {
    pub name: String,
    pub partition: Partition,
    pub kind: DimensionKind,
}

impl Dimension {
    pub fn continuous(name: &str, partition: Partition, lo: f64, hi: f64, scale: Scale) -> Self {
        Self {
            name: name.to_string(),
            partition,
            kind: DimensionKind::Continuous { lo, hi, scale },
        }
    }

    pub fn discrete(name: &str, partition: Partition, values: &[f64]) -> Self {
        Self {
            name: name.to_string(),
            partition,
            kind: DimensionKind::Discrete { values: values.to_vec() },
        }
    }

    pub fn categorical(name: &str, partition: Partition, labels: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            partition,
            kind: DimensionKind::Categorical {
                labels: labels.iter().map(|s| s.to_string()).collect(),
            },
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSpace(format!("`{}`: {msg}", self.name)));
        match &self.kind {
            DimensionKind::Continuous { lo, hi, .. } => {
                if !(lo.is_finite() && hi.is_finite()) {
                    return bad("bounds must be finite".into());
                }
                if lo >= hi {
                    return bad(format!("requires lo < hi, got [{lo}, {hi}]"));
                }
            }
            DimensionKind::Discrete { values } => {
                if values.is_empty() {
                    return bad("needs at least one value".into());
                }
                if values.iter().any(|v| !v.is_finite()) {
                    return bad("values must be finite".into());
                }
                if values.windows(2).any(|w| w[0] >= w[1]) {
                    return bad("values must be strictly increasing".into());
                }
            }
            DimensionKind::Categorical { labels } => {
                if labels.is_empty() {
                    return bad("needs at least one label".into());
                }
                let unique: HashSet<_> = labels.iter().collect();
                if unique.len() != labels.len() {
                    return bad("labels must be unique".into());
                }
            }
        }
        Ok(())
    }

    fn sample(&self, rng: &mut impl Rng) -> Value {
        match &self.kind {
            DimensionKind::Continuous { lo, hi, .. } => Value::Coord(uniform_in(*lo, *hi, rng)),
            DimensionKind::Discrete { values } => Value::Index(rng.random_range(0..values.len())),
            DimensionKind::Categorical { labels } => Value::Index(rng.random_range(0..labels.len())),
        }
    }

    fn perturb(&self, center: Value, epsilon: f64, rng: &mut impl Rng) -> Value {
        match (&self.kind, center) {
            (DimensionKind::Continuous { lo, hi, .. }, Value::Coord(x)) => {
                let radius = (hi - lo) * epsilon;
                if radius == 0.0 {
                    return Value::Coord(x);
                }
                let a = (x - radius).max(*lo);
                let b = (x + radius).min(*hi);
                Value::Coord(uniform_in(a, b, rng))
            }
            (DimensionKind::Discrete { values }, Value::Index(i)) => {
                let span = (values.len() - 1) as f64 * epsilon;
                let below = span.floor() as usize;
                let above = span.ceil() as usize;
                let a = i.saturating_sub(below);
                let b = (i + above).min(values.len() - 1);
                if a == b {
                    Value::Index(a)
                } else {
                    Value::Index(rng.random_range(a..=b))
                }
            }
            (DimensionKind::Categorical { labels }, Value::Index(i)) => {
                if epsilon > 0.0 && rng.random::<f64>() < epsilon {
                    Value::Index(rng.random_range(0..labels.len()))
                } else {
                    Value::Index(i)
                }
            }
            // Mismatched shapes are rejected by `validate` before we get here.
            (_, v) => v,
        }
    }

    fn check(&self, value: Value) -> Result<()> {
        let out = |detail: String| {
            Err(Error::OutOfDomain {
                name: self.name.clone(),
                detail,
            })
        };
        match (&self.kind, value) {
            (DimensionKind::Continuous { lo, hi, .. }, Value::Coord(x)) => {
                if !(x >= *lo && x <= *hi) {
                    return out(format!("{x} not in [{lo}, {hi}]"));
                }
            }
            (DimensionKind::Discrete { values }, Value::Index(i)) if i >= values.len() => {
                return out(format!("index {i} >= {}", values.len()));
            }
            (DimensionKind::Categorical { labels }, Value::Index(i)) if i >= labels.len() => {
                return out(format!("index {i} >= {}", labels.len()));
            }
            (DimensionKind::Continuous { .. }, Value::Index(_)) => {
                return out("expected a continuous coordinate".into());
            }
            (DimensionKind::Discrete { .. } | DimensionKind::Categorical { .. }, Value::Coord(_)) => {
                return out("expected an index".into());
            }
            _ => {}
        }
        Ok(())
    }
}

/// Uniform draw from `[a, b)`, or exactly `a` for a degenerate interval.
fn uniform_in(a: f64, b: f64, rng: &mut impl Rng) -> f64 {
    if b > a {
        a + (b - a) * rng.random::<f64>()
    } else {
        a
    }
}

/// A concrete coordinate along one dimension.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Value {
    Coord(f64),
    Index(usize),
}

/// One point of a partition of the search space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub partition: Partition,
    pub values: BTreeMap<String, Value>,
}

impl Config {
    pub fn get(&self, name: &str) -> Option<Value> {
        self.values.get(name).copied()
    }
}

/// A full configuration `a = (b, c)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullConfig {
    pub server: Config,
    pub client: Config,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    dims: Vec<Dimension>,
}

impl SearchSpace {
    pub fn new(dims: Vec<Dimension>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::InvalidSpace("no dimensions".into()));
        }
        let mut seen = HashSet::new();
        for d in &dims {
            if !seen.insert(d.name.as_str()) {
                return Err(Error::InvalidSpace(format!("duplicate dimension `{}`", d.name)));
            }
            d.validate()?;
        }
        Ok(Self { dims })
    }

    pub fn dimensions(&self) -> &[Dimension] {
        &self.dims
    }

    pub fn dimension(&self, name: &str) -> Option<&Dimension> {
        self.dims.iter().find(|d| d.name == name)
    }

    fn in_partition(&self, partition: Partition) -> impl Iterator<Item = &Dimension> {
        self.dims.iter().filter(move |d| d.partition == partition)
    }

    /// Samples every dimension of one partition, in declaration order.
    pub fn sample_partition(&self, partition: Partition, rng: &mut impl Rng) -> Config {
        let values = self
            .in_partition(partition)
            .map(|d| (d.name.clone(), d.sample(rng)))
            .collect();
        Config { partition, values }
    }

    /// Samples a full configuration: server dimensions first, then client.
    pub fn sample_uniform(&self, rng: &mut impl Rng) -> FullConfig {
        let server = self.sample_partition(Partition::Server, rng);
        let client = self.sample_partition(Partition::Client, rng);
        FullConfig { server, client }
    }

    /// Draws a point from the `epsilon`-scaled neighbourhood of `center`.
    ///
    /// Continuous dimensions use `[c - (hi-lo)eps, c + (hi-lo)eps]` clipped to
    /// the domain (log-scaled ones in exponent space). Discrete dimensions use
    /// positions `{c - floor(n eps), .., c + ceil(n eps)}` with `n` the last
    /// position. Categorical dimensions are redrawn with probability `epsilon`.
    pub fn perturb_local(&self, center: &Config, epsilon: f64, rng: &mut impl Rng) -> Config {
        assert!(epsilon >= 0.0 && epsilon.is_finite(), "epsilon must be a finite non-negative number");
        let values = self
            .in_partition(center.partition)
            .filter_map(|d| {
                center
                    .get(&d.name)
                    .map(|v| (d.name.clone(), d.perturb(v, epsilon, rng)))
            })
            .collect();
        Config {
            partition: center.partition,
            values,
        }
    }

    /// `center` followed by `k - 1` local perturbations of it.
    pub fn perturbed_arms(&self, center: &Config, k: usize, epsilon: f64, rng: &mut impl Rng) -> Vec<Config> {
        assert!(k >= 1, "need at least one configuration");
        let mut arms = Vec::with_capacity(k);
        arms.push(center.clone());
        for _ in 1..k {
            arms.push(self.perturb_local(center, epsilon, rng));
        }
        arms
    }

    /// The k client configurations handed to one FedEx instance: one uniform
    /// draw and k - 1 perturbations around it.
    pub fn sample_fedex_arms(&self, k: usize, epsilon: f64, rng: &mut impl Rng) -> Vec<Config> {
        let center = self.sample_partition(Partition::Client, rng);
        self.perturbed_arms(&center, k, epsilon, rng)
    }

    pub fn validate(&self, config: &Config) -> Result<()> {
        for d in self.in_partition(config.partition) {
            match config.get(&d.name) {
                Some(v) => d.check(v)?,
                None => return Err(Error::MissingHyperparameter(d.name.clone())),
            }
        }
        for name in config.values.keys() {
            match self.dimension(name) {
                Some(d) if d.partition == config.partition => {}
                _ => {
                    return Err(Error::OutOfDomain {
                        name: name.clone(),
                        detail: "not a dimension of this partition".into(),
                    })
                }
            }
        }
        Ok(())
    }

    /// Decoded numeric value of `name` in `config`, if present and numeric.
    pub fn real(&self, config: &Config, name: &str) -> Option<f64> {
        let dim = self.dimension(name)?;
        match (&dim.kind, config.get(name)?) {
            (DimensionKind::Continuous { scale, .. }, Value::Coord(x)) => Some(scale.decode(x)),
            (DimensionKind::Discrete { values }, Value::Index(i)) => values.get(i).copied(),
            _ => None,
        }
    }

    pub fn label<'a>(&'a self, config: &Config, name: &str) -> Option<&'a str> {
        let dim = self.dimension(name)?;
        match (&dim.kind, config.get(name)?) {
            (DimensionKind::Categorical { labels }, Value::Index(i)) => labels.get(i).map(String::as_str),
            _ => None,
        }
    }

    /// `name=value` pairs in declaration order, separated by `;`.
    pub fn describe(&self, config: &Config) -> String {
        let mut out = String::new();
        for d in self.in_partition(config.partition) {
            if config.get(&d.name).is_none() {
                continue;
            }
            if !out.is_empty() {
                out.push(';');
            }
            let real = self.real(config, &d.name).unwrap_or(f64::NAN);
            match (&d.kind, self.label(config, &d.name)) {
                (_, Some(l)) => write!(out, "{}={}", d.name, l).unwrap(),
                (DimensionKind::Discrete { .. }, None) => write!(out, "{}={}", d.name, real).unwrap(),
                _ => write!(out, "{}={:.6e}", d.name, real).unwrap(),
            }
        }
        out
    }

    /// The default server and client dimensions used for FedAvg-family tuning.
    pub fn default_federated() -> Self {
        use Partition::*;
        Self::new(vec![
            Dimension::continuous("server_lr", Server, -1.0, 1.0, Scale::Log10),
            Dimension::continuous("server_momentum", Server, 0.0, 0.9, Scale::Linear),
            Dimension::continuous("server_decay", Server, -4.0, -2.0, Scale::Log10Complement),
            Dimension::continuous("lr", Client, -4.0, 0.0, Scale::Log10),
            Dimension::continuous("momentum", Client, 0.0, 1.0, Scale::Linear),
            Dimension::continuous("weight_decay", Client, -5.0, -1.0, Scale::Log10),
            Dimension::discrete("epochs", Client, &[1.0, 2.0, 3.0, 4.0, 5.0]),
            Dimension::discrete("batch", Client, &[8.0, 16.0, 32.0, 64.0, 128.0]),
            Dimension::continuous("dropout", Client, 0.0, 0.5, Scale::Linear),
        ])
        .expect("default space is valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SimRng;
    use rand::SeedableRng;

    fn rng(seed: u64) -> SimRng {
        SimRng::seed_from_u64(seed)
    }

    fn one_dim(kind: DimensionKind) -> SearchSpace {
        SearchSpace::new(vec![Dimension {
            name: "x".into(),
            partition: Partition::Client,
            kind,
        }])
        .unwrap()
    }

    #[test]
    fn log_lr_samples_stay_in_range() {
        let space = SearchSpace::default_federated();
        let mut r = rng(1);
        for _ in 0..10_000 {
            let c = space.sample_uniform(&mut r);
            let lr = space.real(&c.client, "lr").unwrap();
            assert!((1e-4..=1.0).contains(&lr), "lr {lr}");
            space.validate(&c.client).unwrap();
            space.validate(&c.server).unwrap();
        }
    }

    #[test]
    fn single_value_dimension_is_constant() {
        let space = one_dim(DimensionKind::Discrete { values: vec![5.0] });
        let mut r = rng(2);
        for _ in 0..100 {
            let c = space.sample_partition(Partition::Client, &mut r);
            assert_eq!(space.real(&c, "x"), Some(5.0));
        }
    }

    #[test]
    fn dropout_mean_matches_uniform_mean() {
        let space = one_dim(DimensionKind::Continuous {
            lo: 0.0,
            hi: 0.5,
            scale: Scale::Linear,
        });
        let mut r = rng(3);
        let n = 1_000_000;
        let sum: f64 = (0..n)
            .map(|_| space.real(&space.sample_partition(Partition::Client, &mut r), "x").unwrap())
            .sum();
        let mean = sum / n as f64;
        assert!((mean - 0.25).abs() < 0.005, "mean {mean}");
    }

    #[test]
    fn continuous_neighbourhood() {
        let space = one_dim(DimensionKind::Continuous {
            lo: 0.0,
            hi: 1.0,
            scale: Scale::Linear,
        });
        let center = Config {
            partition: Partition::Client,
            values: [("x".to_string(), Value::Coord(0.5))].into(),
        };
        let mut r = rng(4);
        let (mut lo, mut hi) = (f64::MAX, f64::MIN);
        for _ in 0..20_000 {
            let x = space.real(&space.perturb_local(&center, 0.1, &mut r), "x").unwrap();
            assert!((0.4..=0.6).contains(&x));
            lo = lo.min(x);
            hi = hi.max(x);
        }
        assert!(lo < 0.401 && hi > 0.599);
    }

    #[test]
    fn discrete_neighbourhood_uses_floor_below_ceil_above() {
        let space = one_dim(DimensionKind::Discrete {
            values: vec![3.0, 4.0, 5.0, 6.0, 7.0],
        });
        let center = Config {
            partition: Partition::Client,
            values: [("x".to_string(), Value::Index(2))].into(),
        };
        let mut r = rng(5);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..2_000 {
            let v = space.real(&space.perturb_local(&center, 0.1, &mut r), "x").unwrap();
            seen.insert(v as i64);
        }
        assert_eq!(seen.into_iter().collect::<Vec<_>>(), vec![5, 6]);
    }

    #[test]
    fn neighbourhood_is_clipped_at_the_boundary() {
        let space = one_dim(DimensionKind::Continuous {
            lo: 0.0,
            hi: 1.0,
            scale: Scale::Linear,
        });
        let center = Config {
            partition: Partition::Client,
            values: [("x".to_string(), Value::Coord(0.02))].into(),
        };
        let mut r = rng(6);
        for _ in 0..5_000 {
            let x = space.real(&space.perturb_local(&center, 0.1, &mut r), "x").unwrap();
            assert!((0.0..=0.12).contains(&x));
        }
    }

    #[test]
    fn zero_epsilon_is_identity() {
        let mut dims = SearchSpace::default_federated().dimensions().to_vec();
        dims.push(Dimension::categorical("act", Partition::Client, &["tanh", "relu", "sigmoid"]));
        let space = SearchSpace::new(dims).unwrap();
        let mut r = rng(7);
        for _ in 0..200 {
            let c = space.sample_partition(Partition::Client, &mut r);
            assert_eq!(space.perturb_local(&c, 0.0, &mut r), c);
        }
    }

    #[test]
    fn log_scaled_perturbation_happens_in_exponent_space() {
        let space = SearchSpace::default_federated();
        let mut r = rng(8);
        for _ in 0..2_000 {
            let c = space.sample_partition(Partition::Client, &mut r);
            let Value::Coord(x) = c.get("lr").unwrap() else { panic!() };
            let p = space.perturb_local(&c, 0.1, &mut r);
            let Value::Coord(y) = p.get("lr").unwrap() else { panic!() };
            assert!((y - x).abs() <= 0.4 + 1e-12);
            assert!((-4.0..=0.0).contains(&y));
            let lr = space.real(&p, "lr").unwrap();
            assert!((lr.log10() - y).abs() < 1e-12);
        }
    }

    #[test]
    fn fedex_arms() {
        let space = SearchSpace::default_federated();
        let mut r = rng(9);
        let one = space.sample_fedex_arms(1, 0.1, &mut r);
        assert_eq!(one.len(), 1);

        let arms = space.sample_fedex_arms(27, 0.1, &mut r);
        assert_eq!(arms.len(), 27);
        let center = &arms[0];
        for a in &arms[1..] {
            assert_eq!(a.partition, Partition::Client);
            space.validate(a).unwrap();
            for d in space.dimensions().iter().filter(|d| d.partition == Partition::Client) {
                match (&d.kind, center.get(&d.name).unwrap(), a.get(&d.name).unwrap()) {
                    (DimensionKind::Continuous { lo, hi, .. }, Value::Coord(c), Value::Coord(x)) => {
                        assert!((x - c).abs() <= (hi - lo) * 0.1 + 1e-12)
                    }
                    (DimensionKind::Discrete { values }, Value::Index(c), Value::Index(x)) => {
                        let span = (values.len() - 1) as f64 * 0.1;
                        assert!(x + span.floor() as usize >= c && x <= c + span.ceil() as usize)
                    }
                    other => panic!("unexpected {other:?}"),
                }
            }
        }
    }

    /// Mann-Whitney U statistic turned into a two-sided normal-approximation p-value.
    fn rank_sum_p(a: &[f64], b: &[f64]) -> f64 {
        let mut all: Vec<(f64, usize)> = a.iter().map(|&x| (x, 0)).chain(b.iter().map(|&x| (x, 1))).collect();
        all.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap());
        let rank_a: f64 = all
            .iter()
            .enumerate()
            .filter(|(_, (_, g))| *g == 0)
            .map(|(i, _)| (i + 1) as f64)
            .sum();
        let (n1, n2) = (a.len() as f64, b.len() as f64);
        let u = rank_a - n1 * (n1 + 1.0) / 2.0;
        let mu = n1 * n2 / 2.0;
        let sigma = (n1 * n2 * (n1 + n2 + 1.0) / 12.0).sqrt();
        let z = ((u - mu) / sigma).abs();
        // two-sided tail via erfc approximation (Abramowitz-Stegun 7.1.26)
        let t = 1.0 / (1.0 + 0.3275911 * z / std::f64::consts::SQRT_2);
        let poly = t * (0.254829592 + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
        poly * (-(z * z) / 2.0).exp()
    }

    #[test]
    fn full_epsilon_covers_the_whole_domain() {
        let space = one_dim(DimensionKind::Continuous {
            lo: -4.0,
            hi: 0.0,
            scale: Scale::Log10,
        });
        let mut r = rng(10);
        let center = Config {
            partition: Partition::Client,
            values: [("x".to_string(), Value::Coord(-2.0))].into(),
        };
        // eps = 1 around the midpoint: interval [-6, 2] clipped to [-4, 0] = whole domain
        let perturbed: Vec<f64> = (0..3_000)
            .map(|_| space.real(&space.perturb_local(&center, 1.0, &mut r), "x").unwrap())
            .collect();
        let uniform: Vec<f64> = (0..3_000)
            .map(|_| space.real(&space.sample_partition(Partition::Client, &mut r), "x").unwrap())
            .collect();
        let p = rank_sum_p(&perturbed, &uniform);
        assert!(p > 0.01, "p = {p}");
    }

    #[test]
    fn fixed_seed_gives_identical_sequences() {
        let space = SearchSpace::default_federated();
        let a: Vec<_> = {
            let mut r = rng(11);
            (0..50).map(|_| space.sample_uniform(&mut r)).collect()
        };
        let b: Vec<_> = {
            let mut r = rng(11);
            (0..50).map(|_| space.sample_uniform(&mut r)).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn construction_rejects_bad_spaces() {
        use Partition::Client;
        assert!(SearchSpace::new(vec![]).is_err());
        assert!(SearchSpace::new(vec![Dimension::continuous("a", Client, 1.0, 1.0, Scale::Linear)]).is_err());
        assert!(SearchSpace::new(vec![Dimension::discrete("a", Client, &[2.0, 1.0])]).is_err());
        assert!(SearchSpace::new(vec![Dimension::discrete("a", Client, &[])]).is_err());
        assert!(SearchSpace::new(vec![
            Dimension::discrete("a", Client, &[1.0]),
            Dimension::discrete("a", Client, &[1.0]),
        ])
        .is_err());
    }

    #[test]
    fn validate_flags_out_of_domain_values() {
        let space = SearchSpace::default_federated();
        let mut r = rng(12);
        let mut c = space.sample_partition(Partition::Client, &mut r);
        c.values.insert("lr".into(), Value::Coord(1.5));
        assert!(matches!(space.validate(&c), Err(Error::OutOfDomain { .. })));
        c.values.insert("lr".into(), Value::Coord(-1.0));
        c.values.remove("batch");
        assert!(matches!(space.validate(&c), Err(Error::MissingHyperparameter(_))));
    }

    #[test]
    fn decay_dimension_decodes_to_one_minus() {
        let space = SearchSpace::default_federated();
        let mut r = rng(13);
        for _ in 0..100 {
            let c = space.sample_partition(Partition::Server, &mut r);
            let g = space.real(&c, "server_decay").unwrap();
            assert!((0.99..=0.9999).contains(&g));
        }
    }
}
