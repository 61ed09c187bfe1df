//! Synthetic federated datasets.
//!
//! Each client draws its data from a client-specific generator whose
//! parameters are `hub + h * perturbation`, so the heterogeneity knob `h`
//! scales every pairwise client distance linearly. The perturbations are drawn
//! the same way for every `h`, which keeps federations with different `h`
//! directly comparable under one seed.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Dataset;
use crate::rng::{self, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationSpec {
    pub clients: usize,
    /// Inclusive range of examples per client.
    pub examples_per_client: [usize; 2],
    pub feature_dim: usize,
    /// Number of classes; 0 generates a regression federation.
    pub classes: usize,
    pub heterogeneity: f64,
    pub iid: bool,
    /// Scale of the class means (classification).
    pub separation: f64,
    /// Label noise standard deviation (regression).
    pub noise: f64,
}

impl Default for FederationSpec {
    fn default() -> Self {
        Self {
            clients: 50,
            examples_per_client: [60, 120],
            feature_dim: 10,
            classes: 5,
            heterogeneity: 0.5,
            iid: false,
            separation: 1.0,
            noise: 0.1,
        }
    }
}

impl FederationSpec {
    /// Lists every violated field.
    pub fn issues(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut push = |f: &str, m: &str| out.push((f.to_string(), m.to_string()));
        if self.clients == 0 {
            push("federation.clients", "must be at least 1");
        }
        let [lo, hi] = self.examples_per_client;
        if lo > hi {
            push("federation.examples_per_client", "lower bound exceeds upper bound");
        }
        if lo < 10 {
            push("federation.examples_per_client", "every client needs at least 10 examples");
        }
        if self.feature_dim == 0 {
            push("federation.feature_dim", "must be at least 1");
        }
        if self.classes == 1 {
            push("federation.classes", "use 0 for regression or at least 2 classes");
        }
        if !(0.0..=1.0).contains(&self.heterogeneity) {
            push("federation.heterogeneity", "must lie in [0, 1]");
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            push("federation.separation", "must be positive");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            push("federation.noise", "must be non-negative");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, _] = self.examples_per_client;
        if lo < 10 {
            return Err(Error::TooFewExamples(lo));
        }
        match self.issues().first() {
            Some((f, m)) => Err(Error::Config(format!("{f}: {m}"))),
            None => Ok(()),
        }
    }

    pub fn is_regression(&self) -> bool {
        self.classes == 0
    }
}

/// One client's train / validation / test splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientDataset {
    pub id: usize,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    /// The generating parameters of this client (class means and label
    /// proportions, or regression weights).
    pub descriptor: Vec<f64>,
}

impl ClientDataset {
    /// Splits `data` 80/10/10 after a seeded shuffle.
    pub fn split(id: usize, data: &Dataset, descriptor: Vec<f64>, rng: &mut impl Rng) -> Result<Self> {
        let n = data.len();
        if n < 10 {
            return Err(Error::TooFewExamples(n));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let n_val = n / 10;
        let n_test = n / 10;
        let n_train = n - n_val - n_test;
        Ok(Self {
            id,
            train: data.subset(&order[..n_train]),
            val: data.subset(&order[n_train..n_train + n_val]),
            test: data.subset(&order[n_train + n_val..]),
            descriptor,
        })
    }

    pub fn all(&self) -> Dataset {
        let mut ds = self.train.clone();
        for part in [&self.val, &self.test] {
            ds.features.extend_from_slice(&part.features);
            ds.labels.extend_from_slice(&part.labels);
        }
        ds
    }
}

struct Hub {
    /// class means (C x d) or regression weights (d)
    center: Vec<f64>,
}

fn normal_vec(n: usize, sd: f64, rng: &mut impl Rng) -> Vec<f64> {
    let dist = Normal::new(0.0, sd).unwrap();
    (0..n).map(|_| dist.sample(rng)).collect()
}

fn generate_client(spec: &FederationSpec, hub: &Hub, id: usize, seed: u64) -> (Dataset, Vec<f64>) {
    let mut rng = rng::stream(seed, Stream::Federation, &[1, id as u64]);
    let d = spec.feature_dim;
    let h = spec.heterogeneity;
    let [lo, hi] = spec.examples_per_client;
    let n = rng.random_range(lo..=hi);
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let mut ds = Dataset::new(d);

    if spec.is_regression() {
        let delta = normal_vec(d, 1.0, &mut rng);
        let beta: Vec<f64> = hub.center.iter().zip(&delta).map(|(b, e)| b + h * e).collect();
        for _ in 0..n {
            let x = normal_vec(d, 1.0, &mut rng);
            let y = beta.iter().zip(&x).map(|(b, xi)| b * xi).sum::<f64>() + spec.noise * std_normal.sample(&mut rng);
            ds.push(&x, y).unwrap();
        }
        return (ds, beta);
    }

    let c = spec.classes;
    let delta = normal_vec(c * d, spec.separation, &mut rng);
    let means: Vec<f64> = hub.center.iter().zip(&delta).map(|(m, e)| m + h * e).collect();
    // Dirichlet(0.5, .., 0.5) via normalized gamma draws
    let gamma = Gamma::new(0.5, 1.0).unwrap();
    let raw: Vec<f64> = (0..c).map(|_| gamma.sample(&mut rng)).collect();
    let total: f64 = raw.iter().sum();
    let props: Vec<f64> = raw.iter().map(|s| (1.0 - h) / c as f64 + h * s / total).collect();
    let cumulative: Vec<f64> = props
        .iter()
        .scan(0.0, |acc, p| {
            *acc += p;
            Some(*acc)
        })
        .collect();
    for _ in 0..n {
        let u = rng.random::<f64>() * cumulative[c - 1];
        let y = cumulative.iter().position(|&cp| u < cp).unwrap_or(c - 1);
        let x: Vec<f64> = (0..d).map(|j| means[y * d + j] + std_normal.sample(&mut rng)).collect();
        ds.push(&x, y as f64).unwrap();
    }
    let mut descriptor = means;
    descriptor.extend(props);
    (ds, descriptor)
}

/// Generates a federation. Every client is produced from its own derived
/// stream, so the result does not depend on generation order.
pub fn generate(spec: &FederationSpec, seed: u64) -> Result<Vec<ClientDataset>> {
    spec.validate()?;
    let mut hub_rng = rng::stream(seed, Stream::Federation, &[0]);
    let hub = Hub {
        center: if spec.is_regression() {
            normal_vec(spec.feature_dim, 1.0, &mut hub_rng)
        } else {
            normal_vec(spec.classes * spec.feature_dim, spec.separation, &mut hub_rng)
        },
    };
    let raw: Vec<(Dataset, Vec<f64>)> = (0..spec.clients).map(|i| generate_client(spec, &hub, i, seed)).collect();

    let raw = if spec.iid {
        // Pool everything, shuffle globally, deal back with the original sizes.
        let d = spec.feature_dim;
        let mut pool: Vec<(Vec<f64>, f64)> = raw
            .iter()
            .flat_map(|(ds, _)| (0..ds.len()).map(move |i| (ds.row(i).to_vec(), ds.labels[i])))
            .collect();
        let mut shuffle_rng = rng::stream(seed, Stream::Federation, &[2]);
        pool.shuffle(&mut shuffle_rng);
        let mut rest = pool.as_slice();
        raw.into_iter()
            .map(|(ds, desc)| {
                let (mine, tail) = rest.split_at(ds.len());
                rest = tail;
                (Dataset::from_rows(d, mine).unwrap(), desc)
            })
            .collect()
    } else {
        raw
    };

    raw.into_iter()
        .enumerate()
        .map(|(i, (ds, desc))| {
            let mut split_rng = rng::stream(seed, Stream::Federation, &[3, i as u64]);
            ClientDataset::split(i, &ds, desc, &mut split_rng)
        })
        .collect()
}

/// Mean pairwise Euclidean distance between client generating parameters.
pub fn mean_pairwise_distance(clients: &[ClientDataset]) -> f64 {
    let n = clients.len();
    if n < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += clients[i]
                .descriptor
                .iter()
                .zip(&clients[j].descriptor)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
        }
    }
    total / (n * (n - 1) / 2) as f64
}

const HEADER: &str = "# fedtune federation v1";

/// Writes a federation as whitespace-separated lines:
/// `<client id> <train|val|test> <x_1> .. <x_d> <label>`.
pub fn export(clients: &[ClientDataset], out: &mut impl Write) -> std::io::Result<()> {
    let dim = clients.first().map_or(0, |c| c.train.dim);
    writeln!(out, "{HEADER}")?;
    writeln!(out, "# dim={dim}")?;
    let mut line = String::new();
    for c in clients {
        for (tag, part) in [("train", &c.train), ("val", &c.val), ("test", &c.test)] {
            for i in 0..part.len() {
                line.clear();
                write!(line, "{} {}", c.id, tag).unwrap();
                for x in part.row(i) {
                    write!(line, " {x}").unwrap();
                }
                write!(line, " {}", part.labels[i]).unwrap();
                writeln!(out, "{line}")?;
            }
        }
    }
    Ok(())
}

/// Reads the format written by [`export`]. Descriptors are not stored and
/// come back empty.
pub fn import(input: impl BufRead) -> Result<Vec<ClientDataset>> {
    let mut dim: Option<usize> = None;
    let mut clients: Vec<ClientDataset> = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let lineno = n + 1;
        let err = |message: String| Error::Format { line: lineno, message };
        let line = line.map_err(|e| err(e.to_string()))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(d) = rest.trim().strip_prefix("dim=") {
                dim = Some(d.parse().map_err(|_| err(format!("bad dim `{d}`")))?);
            }
            continue;
        }
        let d = dim.ok_or_else(|| err("data before `# dim=` header".into()))?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != d + 3 {
            return Err(err(format!("expected {} fields, got {}", d + 3, fields.len())));
        }
        let id: usize = fields[0].parse().map_err(|_| err(format!("bad client id `{}`", fields[0])))?;
        let nums: Vec<f64> = fields[2..]
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| err(format!("bad number `{f}`"))))
            .collect::<Result<_>>()?;
        if clients.last().is_none_or(|c| c.id != id) {
            if clients.iter().any(|c| c.id == id) {
                return Err(err(format!("client {id} is not contiguous")));
            }
            clients.push(ClientDataset {
                id,
                train: Dataset::new(d),
                val: Dataset::new(d),
                test: Dataset::new(d),
                descriptor: Vec::new(),
            });
        }
        let client = clients.last_mut().unwrap();
        let part = match fields[1] {
            "train" => &mut client.train,
            "val" => &mut client.val,
            "test" => &mut client.test,
            other => return Err(err(format!("unknown split `{other}`"))),
        };
        part.push(&nums[..d], nums[d])?;
    }
    Ok(clients)
}
