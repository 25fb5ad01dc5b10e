//! Blended-regime benchmark graph: one homophilic, densely connected
//! region and one heterophilic, sparse region, with no edges between them.
//! No single propagation rule suits both, so it is the standard testbed
//! for showing that a gated ensemble beats each of its members.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::matrix::Matrix;
use crate::rng::{rng_for, stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlendParams {
    pub n: usize,
    pub num_classes: usize,
    pub dim: usize,
    /// Share of nodes placed in the homophilic region (rounded to a count).
    pub homophilic_share: f64,
    /// Probability an edge stays within the class, per region.
    pub homophilic_same_class: f64,
    pub heterophilic_same_class: f64,
    /// Expected degree per region.
    pub homophilic_degree: f64,
    pub heterophilic_degree: f64,
    /// Norm of each class mean; means are scaled one-hot directions.
    pub signal: f64,
    pub noise: f64,
}

impl Default for BlendParams {
    fn default() -> Self {
        Self {
            n: 1000,
            num_classes: 2,
            dim: 16,
            homophilic_share: 0.5,
            homophilic_same_class: 0.9,
            heterophilic_same_class: 0.05,
            homophilic_degree: 12.0,
            heterophilic_degree: 4.0,
            signal: 1.0,
            noise: 1.0,
        }
    }
}

impl BlendParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.num_classes < 2 || self.dim < self.num_classes {
            return bad(format!("need 2 <= num_classes <= dim, got {} and {}", self.num_classes, self.dim));
        }
        if self.n < 4 * self.num_classes {
            return bad(format!("n = {} too small for {} classes", self.n, self.num_classes));
        }
        for (name, p) in [
            ("homophilic_share", self.homophilic_share),
            ("homophilic_same_class", self.homophilic_same_class),
            ("heterophilic_same_class", self.heterophilic_same_class),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 1]"));
            }
        }
        if !(self.homophilic_degree > 0.0 && self.heterophilic_degree > 0.0) {
            return bad("degrees must be positive".into());
        }
        if !(self.noise > 0.0 && self.signal.is_finite()) {
            return bad("noise must be positive and signal finite".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Blend {
    pub dataset: Dataset,
    /// `true` for nodes of the homophilic region.
    pub homophilic: Vec<bool>,
}

/// Samples a blended graph. Each node draws `Poisson(deg / 2)` edge stubs
/// to partners in its own region, same-class with the region's
/// probability.
pub fn sample_blend(params: &BlendParams, seed: u64) -> Result<Blend> {
    params.validate()?;
    let mut rng = rng_for(seed, stream::SYNTHETIC);
    let n = params.n;
    let c = params.num_classes;
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_homo = (n as f64 * params.homophilic_share).round() as usize;
    let mut homophilic = vec![false; n];
    for &i in &order[..n_homo] {
        homophilic[i] = true;
    }

    // pools[region][class]
    let mut pools = vec![vec![Vec::new(); c]; 2];
    for i in 0..n {
        pools[homophilic[i] as usize][labels[i]].push(i);
    }
    let mut edges = Vec::new();
    for i in 0..n {
        let region = homophilic[i] as usize;
        let (deg, same) = if homophilic[i] {
            (params.homophilic_degree, params.homophilic_same_class)
        } else {
            (params.heterophilic_degree, params.heterophilic_same_class)
        };
        let stubs = rand_distr::Poisson::new(deg / 2.0)
            .map_err(|e| Error::InvalidParameter(e.to_string()))?
            .sample(&mut rng) as usize;
        for _ in 0..stubs {
            let class = if rng.random_bool(same) {
                labels[i]
            } else {
                let k = rng.random_range(0..c - 1);
                if k >= labels[i] { k + 1 } else { k }
            };
            if let Some(&j) = pools[region][class].choose(&mut rng) {
                if j != i {
                    edges.push((i, j));
                }
            }
        }
    }
    let graph = Graph::from_edges(n, &edges)?;

    let normal = Normal::new(0.0, params.noise).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut features = Matrix::zeros(n, params.dim);
    for i in 0..n {
        let row = features.row_mut(i);
        for (k, v) in row.iter_mut().enumerate() {
            *v = normal.sample(&mut rng) + if k == labels[i] { params.signal } else { 0.0 };
        }
    }
    let dataset = Dataset::new("blend", graph, features, labels, c)?;
    Ok(Blend { dataset, homophilic })
}
