//! Parallel three-layer ReLU networks: forward pass, weight-decay objective,
//! balancing, the map from convex points to networks and back, and a
//! minibatch SGD baseline.

use std::collections::{HashMap, HashSet};
use std::time::Instant;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::arrangements::MaskVector;
use crate::convex_model::{ConvexModel, ConvexPoint, FeasibilityReport, GroupId, Side, Sign};
use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::solver::TraceRecord;

/// `rows x cols` matrix of i.i.d. `N(0, 1) * scale` draws, filled row-major.
pub fn standard_normal_matrix<R: Rng + ?Sized>(
    rng: &mut R,
    rows: usize,
    cols: usize,
    scale: f64,
) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| scale * rng.sample::<f64, _>(StandardNormal))
}

/// One branch: `relu(relu(X W1) w2) * w3`.
#[derive(Debug, Clone, PartialEq)]
pub struct Subnet {
    /// `d x m1`
    pub w1: Array2<f64>,
    pub w2: Array1<f64>,
    pub w3: f64,
}

impl Subnet {
    fn hidden(&self, x: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
        let z1 = x.dot(&self.w1);
        let h1 = z1.mapv(relu);
        let z2 = h1.dot(&self.w2);
        (h1, z2)
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array1<f64> {
        let (_, z2) = self.hidden(x);
        z2.mapv(|v| relu(v) * self.w3)
    }

    /// `(1/2)(||w2||^2 + w3^2)`
    pub fn weight_decay(&self) -> f64 {
        0.5 * (self.w2.dot(&self.w2) + self.w3 * self.w3)
    }

    pub fn w1_frobenius(&self) -> f64 {
        self.w1.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

fn relu(v: f64) -> f64 {
    v.max(0.0)
}

/// A sum of `K` subnets sharing `(d, m1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub d: usize,
    pub m1: usize,
    pub subnets: Vec<Subnet>,
}

#[derive(Serialize, Deserialize)]
struct SubnetDocument {
    /// `W1` row-major, `d * m1` values
    w1: Vec<f64>,
    w2: Vec<f64>,
    w3: f64,
}

#[derive(Serialize, Deserialize)]
struct NetworkDocument {
    k: usize,
    d: usize,
    m1: usize,
    subnets: Vec<SubnetDocument>,
}

impl NetworkParams {
    pub fn empty(d: usize, m1: usize) -> Self {
        Self {
            d,
            m1,
            subnets: Vec::new(),
        }
    }

    pub fn new(d: usize, m1: usize, subnets: Vec<Subnet>) -> Result<Self> {
        let p = Self { d, m1, subnets };
        p.validate()?;
        Ok(p)
    }

    pub fn k(&self) -> usize {
        self.subnets.len()
    }

    fn validate(&self) -> Result<()> {
        for (k, s) in self.subnets.iter().enumerate() {
            if s.w1.dim() != (self.d, self.m1) || s.w2.len() != self.m1 {
                return Err(Error::Shape(format!(
                    "subnet {k}: W1 {:?}, w2 {}, expected ({}, {}) and {}",
                    s.w1.dim(),
                    s.w2.len(),
                    self.d,
                    self.m1,
                    self.m1
                )));
            }
            if !(s.w1.iter().chain(s.w2.iter()).all(|v| v.is_finite()) && s.w3.is_finite()) {
                return Err(Error::InvalidArgument(format!("subnet {k} has non-finite weights")));
            }
        }
        Ok(())
    }

    /// Normal draws scaled by `1/sqrt(fan_in)`: `W1` by `1/sqrt(d)`, `w2` by
    /// `1/sqrt(m1)`, `w3` by 1.
    pub fn random_init<R: Rng + ?Sized>(rng: &mut R, d: usize, m1: usize, k: usize) -> Self {
        let subnets = (0..k)
            .map(|_| {
                let w1 = standard_normal_matrix(rng, d, m1, 1.0 / (d as f64).sqrt());
                let w2 = standard_normal_matrix(rng, m1, 1, 1.0 / (m1 as f64).sqrt())
                    .column(0)
                    .to_owned();
                let w3: f64 = rng.sample(StandardNormal);
                Subnet { w1, w2, w3 }
            })
            .collect();
        Self { d, m1, subnets }
    }

    /// `sum_k relu(relu(X W1k) w2k) w3k`
    pub fn forward(&self, x: &Array2<f64>) -> Result<Array1<f64>> {
        if x.ncols() != self.d {
            return Err(Error::Shape(format!(
                "X has {} columns, network expects d = {}",
                x.ncols(),
                self.d
            )));
        }
        let mut out = Array1::zeros(x.nrows());
        for s in &self.subnets {
            out += &s.forward(x);
        }
        Ok(out)
    }

    /// `(1/2) sum_k (||w2k||^2 + w3k^2)`
    pub fn weight_decay(&self) -> f64 {
        self.subnets.iter().map(Subnet::weight_decay).sum()
    }

    /// `1/2 ||f(X) - y||^2 + (beta/2) sum_k (||w2k||^2 + w3k^2)`. `W1` is
    /// constrained rather than penalised and does not appear.
    pub fn objective(&self, ds: &Dataset, beta: f64) -> Result<f64> {
        let r = self.forward(&ds.x)? - &ds.y;
        Ok(0.5 * r.dot(&r) + beta * self.weight_decay())
    }

    /// Rescales `w2k <- a w2k`, `w3k <- w3k / a` with `a = sqrt(|w3k| / ||w2k||)`
    /// so that `||w2k|| = |w3k|`. Subnets with a zero factor pass through.
    pub fn balance(&self) -> Self {
        let subnets = self
            .subnets
            .iter()
            .map(|s| {
                let n2 = s.w2.dot(&s.w2).sqrt();
                if s.w3 == 0.0 || n2 == 0.0 {
                    return s.clone();
                }
                let a = (s.w3.abs() / n2).sqrt();
                Subnet {
                    w1: s.w1.clone(),
                    w2: &s.w2 * a,
                    w3: s.w3 / a,
                }
            })
            .collect();
        Self {
            d: self.d,
            m1: self.m1,
            subnets,
        }
    }

    /// Whether every subnet satisfies `||W1k||_F <= 1 + 1e-9`.
    pub fn is_feasible_form(&self) -> bool {
        self.subnets.iter().all(|s| s.w1_frobenius() <= 1.0 + 1e-9)
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = NetworkDocument {
            k: self.k(),
            d: self.d,
            m1: self.m1,
            subnets: self
                .subnets
                .iter()
                .map(|s| SubnetDocument {
                    w1: s.w1.iter().copied().collect(),
                    w2: s.w2.to_vec(),
                    w3: s.w3,
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: NetworkDocument = serde_json::from_str(s)?;
        if doc.k != doc.subnets.len() {
            return Err(Error::Shape(format!(
                "document declares k = {} but lists {} subnets",
                doc.k,
                doc.subnets.len()
            )));
        }
        let subnets = doc
            .subnets
            .into_iter()
            .enumerate()
            .map(|(k, s)| {
                let w1 = Array2::from_shape_vec((doc.d, doc.m1), s.w1)
                    .map_err(|e| Error::Shape(format!("subnet {k}: {e}")))?;
                Ok(Subnet {
                    w1,
                    w2: Array1::from(s.w2),
                    w3: s.w3,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(doc.d, doc.m1, subnets)
    }
}

/// Default reconstruction threshold: `1e-10` times the largest group norm.
pub fn default_drop_tol(p: &ConvexPoint) -> f64 {
    1e-10 * p.group_norms().into_iter().fold(0.0, f64::max)
}

/// Builds one subnet per `(side, sign, l, i)` with column `j` taken from
/// group `(side, sign, l, i, j)`.
///
/// With `S = sum_j ||w_j||`, column `j` of `W1` is `s w_j / sqrt(||w_j|| S)`
/// and `w2_j = s sqrt(||w_j||)` where `s = +1` for plus groups and `-1` for
/// minus groups; `w3 = -sqrt(S)` on the unprimed side and `+sqrt(S)` on the
/// primed side. Columns whose group norm is `<= drop_tol` are omitted.
pub fn reconstruct(model: &ConvexModel, p: &ConvexPoint, drop_tol: f64) -> Result<NetworkParams> {
    model.check_point(p)?;
    if !(drop_tol >= 0.0) {
        return Err(Error::InvalidArgument(format!("drop_tol must be >= 0, got {drop_tol}")));
    }
    let (d, m1) = (model.d(), model.m1());
    let norms = p.group_norms();
    let mut subnets = Vec::new();
    // groups are ordered (side, sign, l, i, j): each run of m1 is one subnet
    for start in (0..model.num_groups()).step_by(m1) {
        let id = model.groups()[start];
        // columns at roundoff level carry no direction worth keeping
        let kept = |nj: f64| nj > drop_tol && nj > 0.0;
        let total: f64 = norms[start..start + m1].iter().filter(|&&nj| kept(nj)).sum();
        if total == 0.0 {
            continue;
        }
        let s = id.sign.value();
        let mut w1 = Array2::zeros((d, m1));
        let mut w2 = Array1::zeros(m1);
        for j in 0..m1 {
            let nj = norms[start + j];
            if !kept(nj) {
                continue;
            }
            let scale = s / (nj * total).sqrt();
            w1.column_mut(j).assign(&(&p.group(start + j) * scale));
            w2[j] = s * nj.sqrt();
        }
        let w3 = match id.side {
            Side::Unprimed => -total.sqrt(),
            Side::Primed => total.sqrt(),
        };
        subnets.push(Subnet { w1, w2, w3 });
    }
    NetworkParams::new(d, m1, subnets)
}

/// How realised activation patterns are matched to the plan's masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MaskMatching {
    /// every non-tied sample must agree with the plan mask
    #[default]
    Exact,
    /// fall back to the plan mask closest in Hamming distance; the lifted
    /// point then no longer reproduces the network
    Nearest,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LiftOptions {
    pub matching: MaskMatching,
    /// samples whose pre-activation satisfies `|z| <= tie_tol * scale` match
    /// either bit; the ReLU output there is (numerically) zero either way
    pub tie_tol: f64,
}

impl Default for LiftOptions {
    fn default() -> Self {
        Self {
            matching: MaskMatching::Exact,
            tie_tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layer {
    First,
    Second,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnmatchedSubnet {
    pub subnet: usize,
    pub layer: Layer,
    /// hidden unit whose first-layer pattern is missing from the plan
    pub column: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiftReport {
    pub unmatched: Vec<UnmatchedSubnet>,
    /// subnets with `w3 = 0` or no active unit
    pub skipped: Vec<usize>,
    /// largest Hamming distance (over non-tied samples) accepted in nearest mode
    pub max_mismatch: usize,
    /// groups that received contributions from more than one unit
    pub collisions: usize,
    pub feasibility: FeasibilityReport,
}

impl LiftReport {
    /// Whether the lifted point reproduces the network's output.
    pub fn equality_holds(&self) -> bool {
        self.unmatched.is_empty() && self.max_mismatch == 0
    }
}

/// Plan masks agreeing with `z >= 0` on every sample where `|z_k| > tol_k`,
/// as `(index, mismatch)` ordered by closeness to the realised pattern. In
/// nearest mode only the masks with the fewest mismatches on non-tied
/// samples are kept.
fn match_mask<'a, I>(candidates: I, z: &[f64], tol: &[f64], nearest: bool) -> Vec<(usize, usize)>
where
    I: Iterator<Item = &'a MaskVector>,
{
    let mut keys: Vec<(usize, usize, usize)> = Vec::new(); // (mismatch, hamming, index)
    for (idx, mask) in candidates.enumerate() {
        let mut mismatch = 0;
        let mut hamming = 0;
        for (k, &zk) in z.iter().enumerate() {
            let bit = zk >= 0.0;
            if bit != mask.get(k) {
                hamming += 1;
                if zk.abs() > tol[k] {
                    mismatch += 1;
                }
            }
        }
        if mismatch > 0 && !nearest {
            continue;
        }
        keys.push((mismatch, hamming, idx));
    }
    keys.sort_unstable();
    let least = keys.first().map(|k| k.0);
    keys.into_iter()
        .take_while(|k| Some(k.0) == least)
        .map(|(mismatch, _, idx)| (idx, mismatch))
        .collect()
}

/// Places each hidden unit `j` of each subnet into the group whose plan
/// masks match its realised patterns: `w_g += |w3| w2_j w1_j`, primed side
/// when `w3 > 0`, plus sign when `w2_j > 0`.
pub fn lift_to_convex(
    model: &ConvexModel,
    params: &NetworkParams,
    plan: &crate::arrangements::ArrangementPlan,
    opts: LiftOptions,
) -> Result<(ConvexPoint, LiftReport)> {
    if params.d != model.d() || params.m1 != model.m1() {
        return Err(Error::Shape(format!(
            "network is (d = {}, m1 = {}), model is (d = {}, m1 = {})",
            params.d,
            params.m1,
            model.d(),
            model.m1()
        )));
    }
    if plan.content_hash() != model.plan_hash() {
        return Err(Error::InvalidArgument("plan does not belong to the model".into()));
    }
    if !(opts.tie_tol >= 0.0) {
        return Err(Error::InvalidArgument(format!("tie_tol must be >= 0, got {}", opts.tie_tol)));
    }
    let x = model.x();
    let row_norms: Vec<f64> = x.outer_iter().map(|r| r.dot(&r).sqrt()).collect();
    let nearest = opts.matching == MaskMatching::Nearest;
    let mut point = model.zero_point();
    let mut hits = vec![0usize; model.num_groups()];
    let mut report = LiftReport {
        unmatched: Vec::new(),
        skipped: Vec::new(),
        max_mismatch: 0,
        collisions: 0,
        feasibility: FeasibilityReport::default(),
    };

    // candidate plan entries per subnet: (subnet, second-layer matches,
    // first-layer matches per active column)
    type Firsts = Vec<(usize, Vec<(usize, usize)>)>;
    let mut matched: Vec<(usize, Vec<(usize, usize)>, Firsts)> = Vec::new();
    for (k, s) in params.subnets.iter().enumerate() {
        let active: Vec<usize> = (0..params.m1)
            .filter(|&j| s.w2[j] != 0.0 && s.w1.column(j).iter().any(|&v| v != 0.0))
            .collect();
        if s.w3 == 0.0 || active.is_empty() {
            report.skipped.push(k);
            continue;
        }
        let (_, z2) = s.hidden(x);
        let reach: f64 = (0..params.m1)
            .map(|j| s.w2[j].abs() * s.w1.column(j).dot(&s.w1.column(j)).sqrt())
            .sum();
        let tol2: Vec<f64> = row_norms.iter().map(|r| opts.tie_tol * r * reach).collect();
        let seconds = match_mask(plan.second_layer.iter(), z2.as_slice().expect("contiguous"), &tol2, nearest);
        if seconds.is_empty() {
            report.unmatched.push(UnmatchedSubnet {
                subnet: k,
                layer: Layer::Second,
                column: None,
            });
            continue;
        }
        let mut firsts = Vec::with_capacity(active.len());
        let mut missing = None;
        for &j in &active {
            let w1j = s.w1.column(j);
            let z1 = x.dot(&w1j);
            let wn = w1j.dot(&w1j).sqrt();
            let tol1: Vec<f64> = row_norms.iter().map(|r| opts.tie_tol * r * wn).collect();
            let cands = (0..plan.p1).map(|i| plan.first(i, j));
            let found = match_mask(cands, z1.as_slice().expect("contiguous"), &tol1, nearest);
            if found.is_empty() {
                missing = Some(j);
                break;
            }
            firsts.push((j, found));
        }
        if let Some(j) = missing {
            report.unmatched.push(UnmatchedSubnet {
                subnet: k,
                layer: Layer::First,
                column: Some(j),
            });
            continue;
        }
        matched.push((k, seconds, firsts));
    }

    // Masks can match several plan entries when samples tie, so a greedy
    // choice can push two units into one group. Subnets whose columns share
    // a first-layer entry are matched to distinct (l, i) slots by augmenting
    // paths; the rest take the first free group per column.
    let slot_options: Vec<Vec<(SlotKey, usize)>> = matched
        .iter()
        .map(|(k, seconds, firsts)| {
            let s = &params.subnets[*k];
            // reconstructed subnets carry one sign on every active column
            let plus = s.w2[firsts[0].0] > 0.0;
            let mut opts = Vec::new();
            for &(l, mis2) in seconds {
                for &(i, mis1) in &firsts[0].1 {
                    let shared = firsts[1..].iter().map(|(_, f)| f.iter().find(|c| c.0 == i).map(|c| c.1));
                    let worst = shared.fold(Some(mis1.max(mis2)), |acc, m| Some(acc?.max(m?)));
                    if let Some(m) = worst {
                        opts.push((SlotKey { primed: s.w3 > 0.0, plus, l, i }, m));
                    }
                }
            }
            opts.sort_by_key(|o| o.1);
            opts
        })
        .collect();
    let mut owner: HashMap<SlotKey, usize> = HashMap::new();
    let mut slot_of: Vec<Option<usize>> = vec![None; matched.len()];
    for u in 0..matched.len() {
        let mut seen = HashSet::new();
        augment(u, &slot_options, &mut owner, &mut slot_of, &mut seen);
    }

    for (u, (k, seconds, firsts)) in matched.iter().enumerate() {
        let s = &params.subnets[*k];
        let side = if s.w3 > 0.0 { Side::Primed } else { Side::Unprimed };
        let group_of = |l: usize, i: usize, j: usize| {
            let sign = if s.w2[j] > 0.0 { Sign::Plus } else { Sign::Minus };
            model
                .group_index(GroupId { side, sign, l, i, j })
                .expect("matched indices lie inside the plan")
        };
        let (groups, mismatch) = match slot_of[u] {
            Some(o) => {
                let (key, m) = &slot_options[u][o];
                (firsts.iter().map(|(j, _)| group_of(key.l, key.i, *j)).collect(), *m)
            }
            None => {
                let mut best: Option<(usize, Vec<usize>, usize)> = None; // (collisions, groups, mismatch)
                for &(l, mis2) in seconds {
                    let mut groups = Vec::with_capacity(firsts.len());
                    let mut collisions = 0;
                    let mut mismatch = mis2;
                    for (j, found) in firsts {
                        let pick = found
                            .iter()
                            .find(|(i, _)| hits[group_of(l, *i, *j)] == 0)
                            .unwrap_or(&found[0]);
                        let g = group_of(l, pick.0, *j);
                        collisions += usize::from(hits[g] > 0);
                        mismatch = mismatch.max(pick.1);
                        groups.push(g);
                    }
                    if best.as_ref().is_none_or(|b| collisions < b.0) {
                        best = Some((collisions, groups, mismatch));
                    }
                    if collisions == 0 {
                        break;
                    }
                }
                let (_, groups, mismatch) = best.expect("at least one second-layer candidate");
                (groups, mismatch)
            }
        };
        report.max_mismatch = report.max_mismatch.max(mismatch);
        for ((j, _), g) in firsts.iter().zip(groups) {
            let contrib = &s.w1.column(*j) * (s.w3.abs() * s.w2[*j]);
            let mut row = point.group_mut(g);
            row += &contrib;
            hits[g] += 1;
        }
    }
    report.collisions = hits.iter().filter(|&&h| h > 1).count();
    report.feasibility = model.feasibility(&point)?;
    Ok((point, report))
}

/// The groups of one side, sign and pair of plan entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct SlotKey {
    primed: bool,
    plus: bool,
    l: usize,
    i: usize,
}

// Kuhn's augmenting path step: give subnet `u` a slot, moving earlier
// owners to their other options when needed.
fn augment(
    u: usize,
    options: &[Vec<(SlotKey, usize)>],
    owner: &mut HashMap<SlotKey, usize>,
    slot_of: &mut [Option<usize>],
    seen: &mut HashSet<SlotKey>,
) -> bool {
    for (o, (key, _)) in options[u].iter().enumerate() {
        if !seen.insert(*key) {
            continue;
        }
        let free = match owner.get(key).copied() {
            None => true,
            Some(v) => augment(v, options, owner, slot_of, seen),
        };
        if free {
            owner.insert(*key, u);
            slot_of[u] = Some(o);
            return true;
        }
    }
    false
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub m1: usize,
    pub k: usize,
    pub beta: f64,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    /// rescale each `W1k` onto the unit Frobenius ball after every step
    pub projection: bool,
}

impl SgdConfig {
    fn validate(&self, n: usize) -> Result<()> {
        if self.m1 == 0 || self.k == 0 {
            return Err(Error::InvalidArgument("m1 and K must be >= 1".into()));
        }
        if self.batch == 0 || self.batch > n {
            return Err(Error::InvalidArgument(format!(
                "batch must lie in 1..={n}, got {}",
                self.batch
            )));
        }
        if !(self.beta >= 0.0 && self.lr >= 0.0 && self.beta.is_finite() && self.lr.is_finite()) {
            return Err(Error::InvalidArgument("beta and lr must be finite and >= 0".into()));
        }
        Ok(())
    }
}

fn project_frobenius(params: &mut NetworkParams) {
    for s in &mut params.subnets {
        let f = s.w1_frobenius();
        if f > 1.0 {
            s.w1 /= f;
        }
    }
}

/// Minibatch SGD on the weight-decay objective. The minibatch data-fit
/// gradient is scaled by `n / |B|` so each step is an unbiased estimate of
/// the full gradient. One trace record per epoch, starting at epoch 0.
pub fn sgd_train(ds: &Dataset, cfg: &SgdConfig) -> Result<(NetworkParams, Vec<TraceRecord>)> {
    cfg.validate(ds.n())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = NetworkParams::random_init(&mut rng, ds.d(), cfg.m1, cfg.k);
    if cfg.projection {
        project_frobenius(&mut params);
    }
    let start = Instant::now();
    let record = |epoch: usize, params: &NetworkParams| -> Result<TraceRecord> {
        let obj = params.objective(ds, cfg.beta)?;
        if !obj.is_finite() {
            return Err(Error::SgdDiverged { epoch });
        }
        Ok(TraceRecord {
            iter: epoch,
            stage: "sgd".into(),
            rho: None,
            objective: obj,
            feasibility: None,
            elapsed_s: start.elapsed().as_secs_f64(),
        })
    };
    let mut trace = vec![record(0, &params)?];
    let n = ds.n();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch) {
            let xb = ds.x.select(Axis(0), batch);
            let yb = ds.y.select(Axis(0), batch);
            sgd_step(&mut params, &xb, &yb, n as f64 / batch.len() as f64, cfg);
            if cfg.projection {
                project_frobenius(&mut params);
            }
        }
        trace.push(record(epoch, &params)?);
    }
    Ok((params, trace))
}

fn sgd_step(params: &mut NetworkParams, xb: &Array2<f64>, yb: &Array1<f64>, scale: f64, cfg: &SgdConfig) {
    let hidden: Vec<_> = params.subnets.iter().map(|s| s.hidden(xb)).collect();
    let mut out = Array1::<f64>::zeros(xb.nrows());
    for (s, (_, z2)) in params.subnets.iter().zip(&hidden) {
        out.zip_mut_with(z2, |o, &z| *o += relu(z) * s.w3);
    }
    let r = (out - yb) * scale;
    for (s, (h1, z2)) in params.subnets.iter_mut().zip(hidden) {
        let h2 = z2.mapv(relu);
        let g3 = h2.dot(&r) + cfg.beta * s.w3;
        // d/dz2, with relu'(0) = 0
        let dz2: Array1<f64> = r
            .iter()
            .zip(z2.iter())
            .map(|(ri, zi)| if *zi > 0.0 { ri * s.w3 } else { 0.0 })
            .collect();
        let g2 = h1.t().dot(&dz2) + &s.w2 * cfg.beta;
        let mut dz1 = Array2::zeros(h1.dim());
        for ((k, j), v) in dz1.indexed_iter_mut() {
            if h1[[k, j]] > 0.0 {
                *v = dz2[k] * s.w2[j];
            }
        }
        let g1 = xb.t().dot(&dz1);
        s.w1.scaled_add(-cfg.lr, &g1);
        s.w2.scaled_add(-cfg.lr, &g2);
        s.w3 -= cfg.lr * g3;
    }
}

/// Gradient of the full-batch weight-decay objective, in subnet order
/// `(dW1, dw2, dw3)`.
pub fn objective_gradient(params: &NetworkParams, ds: &Dataset, beta: f64) -> Result<Vec<(Array2<f64>, Array1<f64>, f64)>> {
    let mut copy = params.clone();
    let cfg = SgdConfig {
        m1: params.m1,
        k: params.k().max(1),
        beta,
        lr: 1.0,
        batch: ds.n(),
        epochs: 0,
        seed: 0,
        projection: false,
    };
    if ds.d() != params.d {
        return Err(Error::Shape("dataset and network disagree on d".into()));
    }
    sgd_step(&mut copy, &ds.x, &ds.y, 1.0, &cfg);
    Ok(params
        .subnets
        .iter()
        .zip(&copy.subnets)
        .map(|(a, b)| (&a.w1 - &b.w1, &a.w2 - &b.w2, a.w3 - b.w3))
        .collect())
}

/// Realised first-layer masks (one per hidden unit) and second-layer mask
/// of a subnet on `x`.
pub fn realized_masks(s: &Subnet, x: &Array2<f64>) -> (Vec<MaskVector>, MaskVector) {
    let (_, z2) = s.hidden(x);
    let first = (0..s.w1.ncols())
        .map(|j| MaskVector::from_preactivation(x.dot(&s.w1.column(j)).view()))
        .collect();
    (first, MaskVector::from_preactivation(z2.view()))
}
