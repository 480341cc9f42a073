//! Hyperplane-arrangement masks for the two ReLU layers.
//!
//! A mask is the 0/1 activation pattern `1[z >= 0]` of a pre-activation
//! vector over the `n` samples. First-layer masks come from `z = X u`,
//! second-layer masks from `z = relu(X U1) u2`. Plans are either sampled
//! from Gaussian witnesses or, at desk scale, enumerated exactly for the
//! first layer.

use std::collections::HashSet;
use std::fmt;

use ndarray::{Array1, Array2, ArrayView1};
use num_bigint::BigUint;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::linalg::ldp;
use crate::network::standard_normal_matrix;

/// Diagonal of a 0/1 mask matrix, one bit per sample.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MaskVector(Vec<bool>);

impl MaskVector {
    pub fn new(bits: Vec<bool>) -> Self {
        Self(bits)
    }

    /// `1[z >= 0]`, ties resolving to 1.
    pub fn from_preactivation(z: ArrayView1<f64>) -> Self {
        Self(z.iter().map(|&v| v >= 0.0).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn get(&self, k: usize) -> bool {
        self.0[k]
    }

    pub fn count_ones(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn hamming(&self, other: &MaskVector) -> usize {
        self.0.iter().zip(&other.0).filter(|(a, b)| a != b).count()
    }

    pub fn to_bitstring(&self) -> String {
        self.0.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }

    pub fn from_bitstring(s: &str) -> Result<Self> {
        s.chars()
            .map(|c| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                other => Err(Error::InvalidArgument(format!(
                    "mask bit-string contains {other:?}"
                ))),
            })
            .collect::<Result<Vec<_>>>()
            .map(Self)
    }
}

impl fmt::Debug for MaskVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "MaskVector({})", self.to_bitstring())
    }
}

impl Serialize for MaskVector {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_bitstring())
    }
}

impl<'de> Deserialize<'de> for MaskVector {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        MaskVector::from_bitstring(&s).map_err(serde::de::Error::custom)
    }
}

/// First-layer pattern `1[X u >= 0]`.
pub fn first_layer_mask(x: &Array2<f64>, u: ArrayView1<f64>) -> MaskVector {
    MaskVector::from_preactivation(x.dot(&u).view())
}

/// Second-layer pattern `1[relu(X U1) u2 >= 0]`.
pub fn second_layer_mask(x: &Array2<f64>, u1: &Array2<f64>, u2: ArrayView1<f64>) -> MaskVector {
    let hidden = x.dot(u1).mapv(|v| v.max(0.0));
    MaskVector::from_preactivation(hidden.dot(&u2).view())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanMode {
    Sampled,
    Exact,
}

/// Random weights that realised a second-layer mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecondWitness {
    pub u1: Array2<f64>,
    pub u2: Array1<f64>,
}

/// The fixed masks `D_1ij` (P1 x m1 grid) and `D_2l` (P2 of them) that index
/// the lifted convex model, plus the witnesses that generated them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrangementPlan {
    pub n: usize,
    pub d: usize,
    pub m1: usize,
    pub p1: usize,
    pub p2: usize,
    pub mode: PlanMode,
    pub seed: u64,
    /// `first_layer[i][j]` is `D_1ij`.
    pub first_layer: Vec<Vec<MaskVector>>,
    pub second_layer: Vec<MaskVector>,
    /// `first_witnesses[i][j]` satisfies `1[X u >= 0] = D_1ij`.
    pub first_witnesses: Vec<Vec<Array1<f64>>>,
    pub second_witnesses: Vec<SecondWitness>,
}

impl ArrangementPlan {
    pub fn first(&self, i: usize, j: usize) -> &MaskVector {
        &self.first_layer[i][j]
    }

    pub fn second(&self, l: usize) -> &MaskVector {
        &self.second_layer[l]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let plan: Self = serde_json::from_str(s)?;
        plan.check_shape()?;
        Ok(plan)
    }

    /// SHA-256 of the compact JSON encoding.
    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("plan serialises");
        hex::encode(Sha256::digest(&bytes))
    }

    fn check_shape(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Shape(msg));
        if self.first_layer.len() != self.p1 || self.second_layer.len() != self.p2 {
            return bad(format!(
                "plan declares P1 = {}, P2 = {} but stores {} and {} masks",
                self.p1,
                self.p2,
                self.first_layer.len(),
                self.second_layer.len()
            ));
        }
        if self.first_layer.iter().any(|row| row.len() != self.m1) {
            return bad("first-layer row does not have m1 masks".into());
        }
        let all = self
            .first_layer
            .iter()
            .flatten()
            .chain(self.second_layer.iter());
        if all.into_iter().any(|m| m.len() != self.n) {
            return bad(format!("mask length differs from n = {}", self.n));
        }
        for j in 0..self.m1 {
            let set: HashSet<&MaskVector> = self.first_layer.iter().map(|r| &r[j]).collect();
            if set.len() != self.p1 {
                return bad(format!("duplicate first-layer masks in column {j}"));
            }
        }
        let set: HashSet<&MaskVector> = self.second_layer.iter().collect();
        if set.len() != self.p2 {
            return bad("duplicate second-layer masks".into());
        }
        Ok(())
    }

    /// Structural checks plus a bit-exact re-derivation of every stored mask
    /// from its witness on `ds`.
    pub fn validate(&self, ds: &Dataset) -> Result<()> {
        self.check_shape()?;
        if ds.n() != self.n || ds.d() != self.d {
            return Err(Error::Shape(format!(
                "plan built for n = {}, d = {} but dataset is {} x {}",
                self.n,
                self.d,
                ds.n(),
                ds.d()
            )));
        }
        for (i, row) in self.first_layer.iter().enumerate() {
            for (j, mask) in row.iter().enumerate() {
                let u = &self.first_witnesses[i][j];
                if &first_layer_mask(&ds.x, u.view()) != mask {
                    return Err(Error::InvalidArgument(format!(
                        "first-layer mask ({i}, {j}) does not match its witness"
                    )));
                }
            }
        }
        for (l, (mask, w)) in self
            .second_layer
            .iter()
            .zip(&self.second_witnesses)
            .enumerate()
        {
            if &second_layer_mask(&ds.x, &w.u1, w.u2.view()) != mask {
                return Err(Error::InvalidArgument(format!(
                    "second-layer mask {l} does not match its witness"
                )));
            }
        }
        Ok(())
    }
}

fn sample_second_layer(
    ds: &Dataset,
    m1: usize,
    p2_target: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<MaskVector>, Vec<SecondWitness>) {
    let mut seen = HashSet::new();
    let mut masks = Vec::new();
    let mut witnesses = Vec::new();
    for _ in 0..p2_target {
        let u1 = standard_normal_matrix(rng, ds.d(), m1, 1.0);
        let u2 = standard_normal_matrix(rng, m1, 1, 1.0).column(0).to_owned();
        let mask = second_layer_mask(&ds.x, &u1, u2.view());
        if seen.insert(mask.clone()) {
            masks.push(mask);
            witnesses.push(SecondWitness { u1, u2 });
        }
    }
    (masks, witnesses)
}

fn check_counts(m1: usize, p1_target: usize, p2_target: usize) -> Result<()> {
    if m1 == 0 || p1_target == 0 || p2_target == 0 {
        return Err(Error::InvalidArgument(
            "m1, P1 and P2 targets must be >= 1".into(),
        ));
    }
    Ok(())
}

/// Gaussian sampling of both layers' masks. Each column `j` draws
/// `p1_target` witnesses and keeps its distinct masks in first-seen order;
/// columns are then truncated to the smallest distinct count so the grid
/// stays rectangular.
pub fn sample_plan(
    ds: &Dataset,
    m1: usize,
    p1_target: usize,
    p2_target: usize,
    seed: u64,
) -> Result<ArrangementPlan> {
    check_counts(m1, p1_target, p2_target)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut columns: Vec<Vec<(MaskVector, Array1<f64>)>> = Vec::with_capacity(m1);
    for _ in 0..m1 {
        let u = standard_normal_matrix(&mut rng, p1_target, ds.d(), 1.0);
        let mut seen = HashSet::new();
        let mut col = Vec::new();
        for row in u.outer_iter() {
            let mask = first_layer_mask(&ds.x, row);
            if seen.insert(mask.clone()) {
                col.push((mask, row.to_owned()));
            }
        }
        columns.push(col);
    }
    let p1 = columns.iter().map(Vec::len).min().unwrap_or(0);
    let mut first_layer = vec![Vec::with_capacity(m1); p1];
    let mut first_witnesses = vec![Vec::with_capacity(m1); p1];
    for col in &columns {
        for (i, (mask, u)) in col.iter().take(p1).enumerate() {
            first_layer[i].push(mask.clone());
            first_witnesses[i].push(u.clone());
        }
    }
    let (second_layer, second_witnesses) = sample_second_layer(ds, m1, p2_target, &mut rng);
    Ok(ArrangementPlan {
        n: ds.n(),
        d: ds.d(),
        m1,
        p1,
        p2: second_layer.len(),
        mode: PlanMode::Sampled,
        seed,
        first_layer,
        second_layer,
        first_witnesses,
        second_witnesses,
    })
}

/// Exact first layer (shared by every column) with a sampled second layer.
pub fn exact_plan(ds: &Dataset, m1: usize, p2_target: usize, seed: u64) -> Result<ArrangementPlan> {
    check_counts(m1, 1, p2_target)?;
    let cells = enumerate_first_layer(ds)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (second_layer, second_witnesses) = sample_second_layer(ds, m1, p2_target, &mut rng);
    let first_layer = cells.iter().map(|(m, _)| vec![m.clone(); m1]).collect();
    let first_witnesses = cells.iter().map(|(_, w)| vec![w.clone(); m1]).collect();
    Ok(ArrangementPlan {
        n: ds.n(),
        d: ds.d(),
        m1,
        p1: cells.len(),
        p2: second_layer.len(),
        mode: PlanMode::Exact,
        seed,
        first_layer,
        second_layer,
        first_witnesses,
        second_witnesses,
    })
}

pub const ENUMERATION_MAX_N: usize = 25;
pub const ENUMERATION_MAX_D: usize = 3;

/// Every open cell of the central arrangement `{w : x_k^T w = 0}`, as its
/// mask `1[X w >= 0]` and a generic witness `w` (no row on its hyperplane).
///
/// Rows are added one at a time; each sign prefix is extended by a sign for
/// the next row whenever the strict system `s_t x_t^T w > 0` stays feasible,
/// decided by least-distance programming on `s_t x_t^T w >= 1`. All-zero
/// rows are always active.
pub fn enumerate_first_layer(ds: &Dataset) -> Result<Vec<(MaskVector, Array1<f64>)>> {
    let (n, d) = (ds.n(), ds.d());
    if n > ENUMERATION_MAX_N && d > ENUMERATION_MAX_D {
        return Err(Error::EnumerationTooLarge { n, d });
    }
    let rows: Vec<Vec<f64>> = ds.x.outer_iter().map(|r| r.to_vec()).collect();
    let active: Vec<usize> = (0..n)
        .filter(|&k| rows[k].iter().any(|&v| v != 0.0))
        .collect();

    struct Prefix {
        signs: Vec<f64>,
        witness: Option<Vec<f64>>,
    }
    let strictly_satisfies = |w: &[f64], idx: &[usize], signs: &[f64]| -> bool {
        idx.iter()
            .zip(signs)
            .all(|(&k, &s)| s * rows[k].iter().zip(w).map(|(a, b)| a * b).sum::<f64>() > 0.0)
    };

    let mut prefixes = vec![Prefix {
        signs: Vec::new(),
        witness: None,
    }];
    for depth in 0..active.len() {
        let idx = &active[..=depth];
        let mut next = Vec::with_capacity(prefixes.len() * 2);
        for p in &prefixes {
            for s in [1.0, -1.0] {
                let mut signs = p.signs.clone();
                signs.push(s);
                let reuse = p
                    .witness
                    .as_ref()
                    .filter(|w| strictly_satisfies(w, &idx[depth..], &signs[depth..]));
                let witness = match reuse {
                    Some(w) => Some(w.clone()),
                    None => {
                        let g: Vec<Vec<f64>> = idx
                            .iter()
                            .zip(&signs)
                            .map(|(&t, &st)| rows[t].iter().map(|v| st * v).collect())
                            .collect();
                        ldp(&g, &vec![1.0; g.len()], d)
                            .filter(|w| strictly_satisfies(w, idx, &signs))
                    }
                };
                if let Some(w) = witness {
                    next.push(Prefix {
                        signs,
                        witness: Some(w),
                    });
                }
            }
        }
        prefixes = next;
    }

    let mut out = Vec::with_capacity(prefixes.len());
    for p in prefixes {
        // no active rows at all: X = 0, single all-ones pattern
        let w = p.witness.unwrap_or_else(|| {
            let mut e = vec![0.0; d];
            if d > 0 {
                e[0] = 1.0;
            }
            e
        });
        let w = Array1::from(w);
        let mask = first_layer_mask(&ds.x, w.view());
        out.push((mask, w));
    }
    Ok(out)
}

fn binomial(n: u64, k: u64) -> BigUint {
    if k > n {
        return BigUint::from(0u32);
    }
    let k = k.min(n - k);
    let mut acc = BigUint::from(1u32);
    for t in 0..k {
        acc = acc * BigUint::from(n - t) / BigUint::from(t + 1);
    }
    acc
}

/// `2 * sum_{k=0}^{r-1} C(n-1, k)`: the number of open cells of a central
/// arrangement of `n` hyperplanes in general position in rank `r`.
pub fn count_bound_first(n: usize, r: usize) -> Result<BigUint> {
    if r == 0 || r > n {
        return Err(Error::InvalidArgument(format!(
            "bound needs 1 <= r <= n, got n = {n}, r = {r}"
        )));
    }
    let sum = (0..r as u64).fold(BigUint::from(0u32), |acc, k| {
        acc + binomial(n as u64 - 1, k)
    });
    Ok(sum * 2u32)
}

/// `P2' * (2 * P1)^m1` with `P2' = count_bound_first(n, m1 * r)` and
/// `P1 = count_bound_first(n, r)`. Requires `m1 * r <= n`.
pub fn count_bound_second(n: usize, r: usize, m1: usize) -> Result<BigUint> {
    if m1 == 0 || r == 0 || m1.saturating_mul(r) > n {
        return Err(Error::BoundAssumption { n, r, m1 });
    }
    let inner = count_bound_first(n, m1 * r)?;
    let p1 = count_bound_first(n, r)?;
    Ok(inner * (p1 * 2u32).pow(m1 as u32))
}
