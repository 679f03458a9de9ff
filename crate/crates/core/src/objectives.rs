//! Training objectives and their gradients.
//!
//! BPR and the three P3S variants share one pairwise term,
//! `ln sigmoid(score(u, winner) - score(u, loser))`, and differ only in which
//! item classes play winner and loser for each user. WMF and MostPop are the
//! non-pairwise baselines.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::interactions::{Dataset, ItemClass, TriPartition};
use crate::latent_model::{dot, ln_sigmoid, sigmoid, Method, ModelParams};

/// Concrete preference relation between two item classes of one user.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Relation {
    /// Purchased over non-clicked.
    PvsN,
    /// Purchased over clicked-only.
    PvsC,
    /// Clicked-only over non-clicked.
    CvsN,
    /// Non-clicked over clicked-only.
    NvsC,
}

impl Relation {
    pub const ALL: [Relation; 4] = [Relation::PvsN, Relation::PvsC, Relation::CvsN, Relation::NvsC];

    pub fn winner_class(self) -> ItemClass {
        match self {
            Relation::PvsN | Relation::PvsC => ItemClass::Purchased,
            Relation::CvsN => ItemClass::ClickedOnly,
            Relation::NvsC => ItemClass::NonClicked,
        }
    }

    pub fn loser_class(self) -> ItemClass {
        match self {
            Relation::PvsN | Relation::CvsN => ItemClass::NonClicked,
            Relation::PvsC | Relation::NvsC => ItemClass::ClickedOnly,
        }
    }

    pub fn from_classes(winner: ItemClass, loser: ItemClass) -> Option<Relation> {
        Relation::ALL
            .into_iter()
            .find(|r| r.winner_class() == winner && r.loser_class() == loser)
    }
}

/// A union of item classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ClassSet {
    pub purchased: bool,
    pub clicked_only: bool,
    pub non_clicked: bool,
}

impl ClassSet {
    pub const PURCHASED: ClassSet = ClassSet::new(true, false, false);
    pub const CLICKED_ONLY: ClassSet = ClassSet::new(false, true, false);
    pub const NON_CLICKED: ClassSet = ClassSet::new(false, false, true);
    pub const NOT_PURCHASED: ClassSet = ClassSet::new(false, true, true);

    pub const fn new(purchased: bool, clicked_only: bool, non_clicked: bool) -> Self {
        ClassSet {
            purchased,
            clicked_only,
            non_clicked,
        }
    }

    pub fn contains(self, class: ItemClass) -> bool {
        match class {
            ItemClass::Purchased => self.purchased,
            ItemClass::ClickedOnly => self.clicked_only,
            ItemClass::NonClicked => self.non_clicked,
        }
    }

    /// Number of the user's items falling in this set.
    pub fn size_in(self, part: &TriPartition) -> usize {
        let mut size = 0;
        if self.purchased {
            size += part.purchased().len();
        }
        if self.clicked_only {
            size += part.clicked_only().len();
        }
        if self.non_clicked {
            size += part.non_clicked_len();
        }
        size
    }
}

/// One group of pairs in a method's objective: every winner-set item is
/// preferred over every loser-set item.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairTerm {
    pub winners: ClassSet,
    pub losers: ClassSet,
    /// False when either side is empty for this user.
    pub active: bool,
}

impl PairTerm {
    pub fn pair_count(&self, part: &TriPartition) -> u64 {
        self.winners.size_in(part) as u64 * self.losers.size_in(part) as u64
    }
}

/// Winner/loser class sets for each pairwise method.
pub fn schema(method: Method) -> Result<&'static [(ClassSet, ClassSet)]> {
    const BPR: [(ClassSet, ClassSet); 1] = [(ClassSet::PURCHASED, ClassSet::NOT_PURCHASED)];
    const P3S1: [(ClassSet, ClassSet); 1] = [(ClassSet::PURCHASED, ClassSet::NON_CLICKED)];
    const P3S2: [(ClassSet, ClassSet); 2] = [
        (ClassSet::PURCHASED, ClassSet::CLICKED_ONLY),
        (ClassSet::CLICKED_ONLY, ClassSet::NON_CLICKED),
    ];
    const P3S3: [(ClassSet, ClassSet); 2] = [
        (ClassSet::PURCHASED, ClassSet::CLICKED_ONLY),
        (ClassSet::NON_CLICKED, ClassSet::CLICKED_ONLY),
    ];
    match method {
        Method::Bpr => Ok(&BPR),
        Method::P3s1 => Ok(&P3S1),
        Method::P3s2 => Ok(&P3S2),
        Method::P3s3 => Ok(&P3S3),
        Method::MostPop | Method::Wmf => Err(Error::UnsupportedMethod(method)),
    }
}

/// The method's pair terms for one user, with empty terms marked inactive.
pub fn pair_schema(method: Method, part: &TriPartition) -> Result<Vec<PairTerm>> {
    Ok(schema(method)?
        .iter()
        .map(|&(winners, losers)| PairTerm {
            winners,
            losers,
            active: winners.size_in(part) > 0 && losers.size_in(part) > 0,
        })
        .collect())
}

/// Total number of (user, winner, loser) pairs the method's objective sums over.
pub fn total_pair_count(dataset: &Dataset, method: Method) -> Result<u64> {
    let terms = schema(method)?;
    Ok(dataset
        .partitions()
        .iter()
        .map(|part| {
            terms
                .iter()
                .map(|(w, l)| w.size_in(part) as u64 * l.size_in(part) as u64)
                .sum::<u64>()
        })
        .sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PairSample {
    pub user: u32,
    pub winner: u32,
    pub loser: u32,
    pub relation: Relation,
}

impl PairSample {
    /// Whether winner and loser sit in the classes `relation` names.
    pub fn is_consistent(&self, part: &TriPartition) -> bool {
        self.winner != self.loser
            && part.class_of(self.winner) == self.relation.winner_class()
            && part.class_of(self.loser) == self.relation.loser_class()
    }
}

/// Gradient of one regularized pair term with respect to the five parameter
/// blocks it touches.
#[derive(Clone, Debug, PartialEq)]
pub struct PairGradient {
    pub user: Vec<f64>,
    pub winner: Vec<f64>,
    pub loser: Vec<f64>,
    pub winner_bias: f64,
    pub loser_bias: f64,
}

fn check_sample(params: &ModelParams, s: &PairSample) -> Result<()> {
    params.check_user(s.user as usize)?;
    params.check_item(s.winner as usize)?;
    params.check_item(s.loser as usize)?;
    if s.winner == s.loser {
        return Err(Error::InvalidSample(s.winner));
    }
    Ok(())
}

/// Ascent direction for `ln sigmoid(d) - lambda/2 * |touched blocks|^2`
/// where `d = score(u, winner) - score(u, loser)`.
pub fn pairwise_gradient(params: &ModelParams, s: &PairSample, lambda: f64) -> Result<PairGradient> {
    check_sample(params, s)?;
    let (u, w, l) = (s.user as usize, s.winner as usize, s.loser as usize);
    let d = params.score_unchecked(u, w) - params.score_unchecked(u, l);
    let g = 1.0 - sigmoid(d);
    let (a, bw, bl) = (params.user(u), params.item(w), params.item(l));
    Ok(PairGradient {
        user: (0..params.k()).map(|f| g * (bw[f] - bl[f]) - lambda * a[f]).collect(),
        winner: a.iter().zip(bw).map(|(af, bf)| g * af - lambda * bf).collect(),
        loser: a.iter().zip(bl).map(|(af, bf)| -g * af - lambda * bf).collect(),
        winner_bias: g - lambda * params.item_bias[w],
        loser_bias: -g - lambda * params.item_bias[l],
    })
}

/// In-place single-pair ascent step. Returns `ln sigmoid(d)` before the step.
///
/// Indices must be valid and winner != loser.
#[inline]
pub(crate) fn ascend_pair(params: &mut ModelParams, u: usize, w: usize, l: usize, eta: f64, lambda: f64) -> f64 {
    let k = params.k();
    let d = params.score_unchecked(u, w) - params.score_unchecked(u, l);
    let g = 1.0 - sigmoid(d);
    let user = &mut params.user_factors[u * k..(u + 1) * k];
    let items = &mut params.item_factors;
    for f in 0..k {
        let a = user[f];
        let bw = items[w * k + f];
        let bl = items[l * k + f];
        user[f] = a + eta * (g * (bw - bl) - lambda * a);
        items[w * k + f] = bw + eta * (g * a - lambda * bw);
        items[l * k + f] = bl + eta * (-g * a - lambda * bl);
    }
    let gw = params.item_bias[w];
    let gl = params.item_bias[l];
    params.item_bias[w] = gw + eta * (g - lambda * gw);
    params.item_bias[l] = gl + eta * (-g - lambda * gl);
    ln_sigmoid(d)
}

/// Objective split into its likelihood and penalty parts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveValue {
    pub log_likelihood: f64,
    pub regularization: f64,
    pub total: f64,
}

/// Items of `part` in `set`, ascending.
fn members(set: ClassSet, part: &TriPartition) -> Vec<u32> {
    (0..part.universe_size() as u32)
        .filter(|&i| set.contains(part.class_of(i)))
        .collect()
}

/// Exact pairwise log-likelihood over every pair of the method's schema,
/// minus `lambda/2 * |params|^2`.
///
/// Cost is O(sum over users of winners x losers); meant for small datasets
/// and verification.
pub fn full_objective(params: &ModelParams, dataset: &Dataset, method: Method, lambda: f64) -> Result<ObjectiveValue> {
    let terms = schema(method)?;
    let mut log_likelihood = 0.0;
    for (u, part) in dataset.partitions().iter().enumerate() {
        let scores = crate::latent_model::score_all(params, u)?;
        for &(wset, lset) in terms {
            let losers = members(lset, part);
            for w in members(wset, part) {
                let sw = scores[w as usize];
                for &l in &losers {
                    log_likelihood += ln_sigmoid(sw - scores[l as usize]);
                }
            }
        }
    }
    let regularization = 0.5 * lambda * params.squared_norm();
    Ok(ObjectiveValue {
        log_likelihood,
        regularization,
        total: log_likelihood - regularization,
    })
}

/// Exact gradient of [`full_objective`], shaped like the parameters.
pub fn full_gradient(params: &ModelParams, dataset: &Dataset, method: Method, lambda: f64) -> Result<ModelParams> {
    let terms = schema(method)?;
    let (m, k) = (params.m(), params.k());
    let mut grad = ModelParams::zeros(params.n(), m, k);
    for (u, part) in dataset.partitions().iter().enumerate() {
        let scores = crate::latent_model::score_all(params, u)?;
        // Net coefficient each item receives from this user's pairs.
        let mut coef = vec![0.0; m];
        for &(wset, lset) in terms {
            let losers = members(lset, part);
            for w in members(wset, part) {
                let sw = scores[w as usize];
                for &l in &losers {
                    let g = 1.0 - sigmoid(sw - scores[l as usize]);
                    coef[w as usize] += g;
                    coef[l as usize] -= g;
                }
            }
        }
        let user = params.user(u).to_vec();
        for (i, &c) in coef.iter().enumerate().filter(|(_, c)| **c != 0.0) {
            let item = params.item(i);
            let gu = grad.user_mut(u);
            for f in 0..k {
                gu[f] += c * item[f];
            }
            let gi = grad.item_mut(i);
            for f in 0..k {
                gi[f] += c * user[f];
            }
            grad.item_bias[i] += c;
        }
    }
    for (g, p) in grad.user_factors.iter_mut().zip(&params.user_factors) {
        *g -= lambda * p;
    }
    for (g, p) in grad.item_factors.iter_mut().zip(&params.item_factors) {
        *g -= lambda * p;
    }
    for (g, p) in grad.item_bias.iter_mut().zip(&params.item_bias) {
        *g -= lambda * p;
    }
    Ok(grad)
}

/// Confidence-weighted squared loss over all n x m cells, with
/// `r = 1` for training purchases and confidence `1 + alpha_conf * r`.
/// Item biases are not part of this model.
pub fn wmf_loss(params: &ModelParams, dataset: &Dataset, alpha_conf: f64, lambda: f64) -> f64 {
    let mut loss = 0.0;
    for (u, part) in dataset.partitions().iter().enumerate() {
        let user = params.user(u);
        for i in 0..params.m() {
            let pred = dot(user, params.item(i));
            if part.is_purchased(i as u32) {
                loss += (1.0 + alpha_conf) * (1.0 - pred).powi(2);
            } else {
                loss += pred * pred;
            }
        }
    }
    let norm: f64 = params
        .user_factors
        .iter()
        .chain(&params.item_factors)
        .map(|v| v * v)
        .sum();
    loss + lambda * norm
}

/// Solves `(G + alpha * sum_{j in rows} y_j y_j^T + lambda I) x = (1 + alpha) sum_j y_j`
/// for one row, where `G = Y^T Y`.
fn solve_row(
    gram: &DMatrix<f64>,
    other: &[f64],
    k: usize,
    positives: &[u32],
    alpha: f64,
    lambda: f64,
) -> Option<DVector<f64>> {
    let mut a = gram.clone();
    let mut b = DVector::zeros(k);
    for &j in positives {
        let y = &other[j as usize * k..(j as usize + 1) * k];
        for r in 0..k {
            b[r] += (1.0 + alpha) * y[r];
            for c in 0..k {
                a[(r, c)] += alpha * y[r] * y[c];
            }
        }
    }
    for r in 0..k {
        a[(r, r)] += lambda;
    }
    a.cholesky().map(|ch| ch.solve(&b))
}

fn gramian(rows: &[f64], k: usize) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(k, k);
    for row in rows.chunks_exact(k) {
        for r in 0..k {
            for c in 0..k {
                g[(r, c)] += row[r] * row[c];
            }
        }
    }
    g
}

/// Re-solves all user rows against fixed item factors with the weighted
/// normal equations, then all item rows against the new user factors.
pub fn wmf_als_sweep(params: &ModelParams, dataset: &Dataset, alpha_conf: f64, lambda: f64) -> Result<ModelParams> {
    let k = params.k();
    let mut out = params.clone();

    let item_gram = gramian(&out.item_factors, k);
    let users: Vec<Option<DVector<f64>>> = dataset
        .partitions()
        .par_iter()
        .map(|part| {
            solve_row(
                &item_gram,
                &params.item_factors,
                k,
                part.purchased(),
                alpha_conf,
                lambda,
            )
        })
        .collect();
    for (u, x) in users.into_iter().enumerate() {
        let x = x.ok_or(Error::Singular { side: "user", row: u })?;
        out.user_mut(u).copy_from_slice(x.as_slice());
    }

    let mut purchasers = vec![Vec::new(); params.m()];
    for (u, part) in dataset.partitions().iter().enumerate() {
        for &i in part.purchased() {
            purchasers[i as usize].push(u as u32);
        }
    }
    let user_gram = gramian(&out.user_factors, k);
    let user_factors = &out.user_factors;
    let items: Vec<Option<DVector<f64>>> = purchasers
        .par_iter()
        .map(|rows| solve_row(&user_gram, user_factors, k, rows, alpha_conf, lambda))
        .collect();
    for (i, x) in items.into_iter().enumerate() {
        let x = x.ok_or(Error::Singular { side: "item", row: i })?;
        out.item_mut(i).copy_from_slice(x.as_slice());
    }
    Ok(out)
}

/// Number of distinct training purchasers per item.
pub fn mostpop_scores(dataset: &Dataset) -> Vec<f64> {
    let mut counts = vec![0.0; dataset.m()];
    for part in dataset.partitions() {
        for &i in part.purchased() {
            counts[i as usize] += 1.0;
        }
    }
    counts
}

#[cfg(test)]
#[allow(clippy::needless_range_loop, clippy::type_complexity)]
mod tests {
    use super::*;
    use crate::interactions::partition;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_params(rng: &mut ChaCha8Rng, n: usize, m: usize, k: usize, scale: f64) -> ModelParams {
        let mut p = ModelParams::zeros(n, m, k);
        for v in p
            .user_factors
            .iter_mut()
            .chain(p.item_factors.iter_mut())
            .chain(p.item_bias.iter_mut())
        {
            *v = rng.random_range(-scale..scale);
        }
        p
    }

    /// Random purchase/click histories over `m` items with purchases a
    /// subset of clicks.
    fn random_dataset(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Dataset {
        let mut purchases = Vec::new();
        let mut clicks = Vec::new();
        for _ in 0..n {
            let mut p = Vec::new();
            let mut c = Vec::new();
            for i in 0..m as u32 {
                let r: f64 = rng.random();
                if r < 0.2 {
                    p.push(i);
                } else if r < 0.5 {
                    c.push(i);
                }
            }
            purchases.push(p);
            clicks.push(c);
        }
        Dataset::from_index_sets(m, &purchases, &clicks, &vec![Vec::new(); n]).unwrap()
    }

    fn active(method: Method, part: &TriPartition) -> Vec<(ClassSet, ClassSet)> {
        pair_schema(method, part)
            .unwrap()
            .into_iter()
            .filter(|t| t.active)
            .map(|t| (t.winners, t.losers))
            .collect()
    }

    #[test]
    fn schema_examples() {
        let part = TriPartition::from_history([1], [1, 2], 6);
        assert_eq!(
            active(Method::P3s2, &part),
            vec![
                (ClassSet::PURCHASED, ClassSet::CLICKED_ONLY),
                (ClassSet::CLICKED_ONLY, ClassSet::NON_CLICKED)
            ]
        );
        let no_clicks = TriPartition::from_history([1], [1], 6);
        assert_eq!(
            active(Method::P3s1, &no_clicks),
            vec![(ClassSet::PURCHASED, ClassSet::NON_CLICKED)]
        );
        let no_buys = TriPartition::from_history([], [1, 2], 6);
        assert!(active(Method::Bpr, &no_buys).is_empty());
        assert!(matches!(
            pair_schema(Method::Wmf, &part),
            Err(Error::UnsupportedMethod(_))
        ));
        assert!(matches!(
            pair_schema(Method::MostPop, &part),
            Err(Error::UnsupportedMethod(_))
        ));
    }

    fn pairs(method: Method, part: &TriPartition) -> Vec<(u32, u32)> {
        let mut out = Vec::new();
        for term in pair_schema(method, part).unwrap() {
            for w in members(term.winners, part) {
                for l in members(term.losers, part) {
                    out.push((w, l));
                }
            }
        }
        out.sort_unstable();
        out
    }

    #[test]
    fn users_without_clicked_only_items() {
        // BPR and P3S-1 both reduce to purchased-over-non-clicked; P3S-2 and
        // P3S-3 have no pair touching the empty clicked-only set.
        let part = TriPartition::from_history([0, 3], [0, 3], 8);
        let expected: Vec<(u32, u32)> = [0u32, 3]
            .iter()
            .flat_map(|&w| [1u32, 2, 4, 5, 6, 7].map(|l| (w, l)))
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        assert_eq!(pairs(Method::Bpr, &part), expected);
        assert_eq!(pairs(Method::P3s1, &part), expected);
        assert!(pairs(Method::P3s2, &part).is_empty());
        assert!(pairs(Method::P3s3, &part).is_empty());
        assert!(active(Method::P3s2, &part).is_empty());
    }

    #[test]
    fn gradient_at_zero_is_symmetric() {
        let p = ModelParams::zeros(2, 4, 3);
        let s = PairSample {
            user: 1,
            winner: 0,
            loser: 2,
            relation: Relation::PvsN,
        };
        let g = pairwise_gradient(&p, &s, 0.0).unwrap();
        assert_eq!(g.winner_bias, 0.5);
        assert_eq!(g.loser_bias, -0.5);
        assert!(g.user.iter().chain(&g.winner).chain(&g.loser).all(|&v| v == 0.0));
    }

    #[test]
    fn invalid_samples_rejected() {
        let p = ModelParams::zeros(2, 4, 3);
        let same = PairSample {
            user: 0,
            winner: 1,
            loser: 1,
            relation: Relation::PvsN,
        };
        assert!(matches!(
            pairwise_gradient(&p, &same, 0.0),
            Err(Error::InvalidSample(1))
        ));
        let oob = PairSample { loser: 9, ..same };
        assert!(matches!(
            pairwise_gradient(&p, &oob, 0.0),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn swapping_winner_and_loser_exchanges_roles() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_params(&mut rng, 3, 5, 4, 1.0);
        let s = PairSample {
            user: 2,
            winner: 1,
            loser: 4,
            relation: Relation::PvsN,
        };
        let swapped = PairSample {
            winner: 4,
            loser: 1,
            ..s
        };
        let a = pairwise_gradient(&p, &s, 0.0).unwrap();
        let b = pairwise_gradient(&p, &swapped, 0.0).unwrap();
        // g' = 1 - sigmoid(-d) = sigmoid(d) = 1 - g, so with winner/loser
        // exchanged the blocks are the original's scaled by -(1-g)/g.
        let d = p.score_unchecked(2, 1) - p.score_unchecked(2, 4);
        let ratio = -(sigmoid(d)) / (1.0 - sigmoid(d));
        for f in 0..4 {
            assert!((b.user[f] - ratio * a.user[f]).abs() < 1e-12);
            assert!((b.winner[f] - ratio * a.loser[f]).abs() < 1e-12);
            assert!((b.loser[f] - ratio * a.winner[f]).abs() < 1e-12);
        }
        assert!((b.winner_bias - ratio * a.loser_bias).abs() < 1e-12);
    }

    #[test]
    fn ascend_pair_matches_gradient_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_params(&mut rng, 3, 6, 4, 0.5);
        let s = PairSample {
            user: 1,
            winner: 2,
            loser: 5,
            relation: Relation::CvsN,
        };
        let (eta, lambda) = (0.07, 0.03);
        let g = pairwise_gradient(&p, &s, lambda).unwrap();
        let mut stepped = p.clone();
        ascend_pair(&mut stepped, 1, 2, 5, eta, lambda);
        for f in 0..4 {
            assert!((stepped.user(1)[f] - (p.user(1)[f] + eta * g.user[f])).abs() < 1e-15);
            assert!((stepped.item(2)[f] - (p.item(2)[f] + eta * g.winner[f])).abs() < 1e-15);
            assert!((stepped.item(5)[f] - (p.item(5)[f] + eta * g.loser[f])).abs() < 1e-15);
        }
        assert!((stepped.item_bias[2] - (p.item_bias[2] + eta * g.winner_bias)).abs() < 1e-15);
        assert!((stepped.item_bias[5] - (p.item_bias[5] + eta * g.loser_bias)).abs() < 1e-15);
        assert_eq!(stepped.user(0), p.user(0));
        assert_eq!(stepped.item(0), p.item(0));
    }

    #[test]
    fn objective_at_zero_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ds = random_dataset(&mut rng, 4, 7);
        let p = ModelParams::zeros(4, 7, 2);
        for method in [Method::Bpr, Method::P3s1, Method::P3s2, Method::P3s3] {
            let v = full_objective(&p, &ds, method, 0.3).unwrap();
            let pairs = total_pair_count(&ds, method).unwrap() as f64;
            assert!((v.log_likelihood - pairs * 0.5f64.ln()).abs() < 1e-9);
            assert_eq!(v.regularization, 0.0);
        }
        assert!(full_objective(&p, &ds, Method::Wmf, 0.1).is_err());
    }

    #[test]
    fn objective_single_user_two_terms() {
        let ds = Dataset::from_index_sets(3, &[vec![0]], &[vec![1]], &[vec![]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_params(&mut rng, 1, 3, 2, 1.0);
        let s = |i| p.score_unchecked(0, i);
        let expected = ln_sigmoid(s(0) - s(1)) + ln_sigmoid(s(1) - s(2));
        let v = full_objective(&p, &ds, Method::P3s2, 0.0).unwrap();
        assert!((v.log_likelihood - expected).abs() < 1e-12);
        assert_eq!(total_pair_count(&ds, Method::P3s2).unwrap(), 2);
    }

    /// Independent evaluation: loops over every (user, i, j) and checks
    /// the pair relation from raw purchase and click membership.
    fn brute_force_objective(p: &ModelParams, ds: &Dataset, method: Method, lambda: f64) -> f64 {
        let purchases = ds.train().items_by_user(crate::interactions::EventKind::Purchase);
        let clicks = ds.train().items_by_user(crate::interactions::EventKind::Click);
        let mut total = 0.0;
        for u in 0..ds.n() {
            let bought = |i: u32| purchases[u].contains(&i);
            let clicked = |i: u32| clicks[u].contains(&i) || bought(i);
            for i in 0..ds.m() as u32 {
                for j in 0..ds.m() as u32 {
                    let wanted = match method {
                        Method::Bpr => bought(i) && !bought(j),
                        Method::P3s1 => bought(i) && !clicked(j),
                        Method::P3s2 => {
                            (bought(i) && clicked(j) && !bought(j)) || (clicked(i) && !bought(i) && !clicked(j))
                        }
                        Method::P3s3 => {
                            (bought(i) && clicked(j) && !bought(j)) || (!clicked(i) && clicked(j) && !bought(j))
                        }
                        _ => unreachable!(),
                    };
                    if wanted {
                        let mut si = p.item_bias[i as usize];
                        let mut sj = p.item_bias[j as usize];
                        for f in 0..p.k() {
                            si += p.user(u)[f] * p.item(i as usize)[f];
                            sj += p.user(u)[f] * p.item(j as usize)[f];
                        }
                        total += (1.0 / (1.0 + (-(si - sj)).exp())).ln();
                    }
                }
            }
        }
        let mut reg = 0.0;
        for v in p.user_factors.iter().chain(&p.item_factors).chain(&p.item_bias) {
            reg += v * v;
        }
        total - lambda / 2.0 * reg
    }

    #[test]
    fn objective_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let ds = random_dataset(&mut rng, 3, 6);
            let p = random_params(&mut rng, 3, 6, 3, 1.0);
            for method in [Method::Bpr, Method::P3s1, Method::P3s2, Method::P3s3] {
                let got = full_objective(&p, &ds, method, 0.07).unwrap().total;
                let want = brute_force_objective(&p, &ds, method, 0.07);
                assert!(
                    (got - want).abs() <= 1e-12 * want.abs().max(1.0),
                    "{method}: {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn objective_likelihood_invariant_to_bias_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ds = random_dataset(&mut rng, 4, 8);
        let p = random_params(&mut rng, 4, 8, 3, 1.0);
        let mut shifted = p.clone();
        shifted.item_bias.iter_mut().for_each(|g| *g += 1.75);
        for method in [Method::Bpr, Method::P3s1, Method::P3s2, Method::P3s3] {
            let a = full_objective(&p, &ds, method, 0.1).unwrap();
            let b = full_objective(&shifted, &ds, method, 0.1).unwrap();
            assert!((a.log_likelihood - b.log_likelihood).abs() < 1e-9);
            assert!(a.regularization != b.regularization);
            let a0 = full_objective(&p, &ds, method, 0.0).unwrap();
            let b0 = full_objective(&shifted, &ds, method, 0.0).unwrap();
            assert!((a0.total - b0.total).abs() < 1e-9);
        }
    }

    #[test]
    fn full_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ds = random_dataset(&mut rng, 3, 6);
        let p = random_params(&mut rng, 3, 6, 2, 0.8);
        let h = 1e-6;
        for method in [Method::Bpr, Method::P3s1, Method::P3s2, Method::P3s3] {
            let grad = full_gradient(&p, &ds, method, 0.05).unwrap();
            let f = |q: &ModelParams| full_objective(q, &ds, method, 0.05).unwrap().total;
            let blocks: [(fn(&mut ModelParams) -> &mut Vec<f64>, &Vec<f64>); 3] = [
                (|q| &mut q.user_factors, &grad.user_factors),
                (|q| &mut q.item_factors, &grad.item_factors),
                (|q| &mut q.item_bias, &grad.item_bias),
            ];
            for (access, analytic) in blocks {
                for idx in 0..analytic.len() {
                    let mut plus = p.clone();
                    access(&mut plus)[idx] += h;
                    let mut minus = p.clone();
                    access(&mut minus)[idx] -= h;
                    let fd = (f(&plus) - f(&minus)) / (2.0 * h);
                    let a = analytic[idx];
                    assert!(
                        (fd - a).abs() <= 1e-6 * a.abs().max(1.0),
                        "{method} idx {idx}: {a} vs {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn wmf_loss_examples() {
        let ds = Dataset::from_index_sets(4, &[vec![2]], &[vec![]], &[vec![]]).unwrap();
        let zero = ModelParams::zeros(1, 4, 3);
        assert_eq!(wmf_loss(&zero, &ds, 40.0, 0.5), 41.0);

        // Exact reconstruction with one-hot factors.
        let mut exact = ModelParams::zeros(1, 4, 1);
        exact.user_factors[0] = 1.0;
        exact.item_factors[2] = 1.0;
        assert_eq!(wmf_loss(&exact, &ds, 40.0, 0.0), 0.0);
    }

    #[test]
    fn wmf_loss_matches_dense_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ds = random_dataset(&mut rng, 4, 5);
        let p = random_params(&mut rng, 4, 5, 3, 1.0);
        let (alpha, lambda) = (7.5, 0.2);
        let purchases = ds.train().items_by_user(crate::interactions::EventKind::Purchase);
        let mut want = 0.0;
        for u in 0..4 {
            for i in 0..5 {
                let r = if purchases[u].contains(&(i as u32)) { 1.0 } else { 0.0 };
                let c = 1.0 + alpha * r;
                let mut x = 0.0;
                for f in 0..3 {
                    x += p.user_factors[u * 3 + f] * p.item_factors[i * 3 + f];
                }
                want += c * (r - x) * (r - x);
            }
        }
        for v in p.user_factors.iter().chain(&p.item_factors) {
            want += lambda * v * v;
        }
        let got = wmf_loss(&p, &ds, alpha, lambda);
        assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0));
        // Biases play no part.
        let mut biased = p.clone();
        biased.item_bias.iter_mut().for_each(|g| *g = 9.0);
        assert_eq!(wmf_loss(&biased, &ds, alpha, lambda), got);
    }

    #[test]
    fn als_sweep_never_increases_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let ds = random_dataset(&mut rng, 12, 15);
            let mut p = random_params(&mut rng, 12, 15, 4, 0.3);
            let mut prev = wmf_loss(&p, &ds, 10.0, 0.1);
            for _ in 0..8 {
                p = wmf_als_sweep(&p, &ds, 10.0, 0.1).unwrap();
                let now = wmf_loss(&p, &ds, 10.0, 0.1);
                assert!(now <= prev + 1e-9, "{now} > {prev}");
                prev = now;
            }
        }
    }

    #[test]
    fn als_scalar_closed_form() {
        // 2 users x 2 items, k = 1: after the user half-sweep,
        // x_u = sum_i c_ui r_ui y_i / (sum_i c_ui y_i^2 + lambda).
        let ds = Dataset::from_index_sets(2, &[vec![0], vec![0, 1]], &[vec![], vec![]], &[vec![], vec![]]).unwrap();
        let mut p = ModelParams::zeros(2, 2, 1);
        p.item_factors.copy_from_slice(&[0.8, -0.3]);
        p.user_factors.copy_from_slice(&[0.1, 0.2]);
        let (alpha, lambda) = (3.0, 0.25);
        let next = wmf_als_sweep(&p, &ds, alpha, lambda).unwrap();
        let y = [0.8f64, -0.3];
        let r = [[1.0, 0.0], [1.0, 1.0]];
        for u in 0..2 {
            let mut num = 0.0;
            let mut den = lambda;
            for i in 0..2 {
                let c = 1.0 + alpha * r[u][i];
                num += c * r[u][i] * y[i];
                den += c * y[i] * y[i];
            }
            assert!((next.user_factors[u] - num / den).abs() < 1e-12);
        }
    }

    #[test]
    fn als_singular_system_reports_error() {
        let ds = Dataset::from_index_sets(3, &[vec![0]], &[vec![]], &[vec![]]).unwrap();
        let p = ModelParams::zeros(1, 3, 2);
        match wmf_als_sweep(&p, &ds, 40.0, 0.0) {
            Err(e @ Error::Singular { .. }) => assert!(e.to_string().contains("lambda > 0")),
            other => panic!("expected singular error, got {other:?}"),
        }
    }

    #[test]
    fn mostpop_counts_distinct_purchasers() {
        let ds = Dataset::from_index_sets(
            4,
            &[vec![0, 1], vec![0], vec![0, 2]],
            &[vec![3], vec![3], vec![1, 3]],
            &[vec![], vec![], vec![]],
        )
        .unwrap();
        assert_eq!(mostpop_scores(&ds), vec![3.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn mostpop_matches_counting_oracle_and_ignores_clicks() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let ds = random_dataset(&mut rng, 20, 12);
        let purchases = ds.train().items_by_user(crate::interactions::EventKind::Purchase);
        let want: Vec<f64> = (0..12u32)
            .map(|i| purchases.iter().filter(|p| p.contains(&i)).count() as f64)
            .collect();
        assert_eq!(mostpop_scores(&ds), want);

        let no_clicks = Dataset::from_index_sets(12, &purchases, &vec![Vec::new(); 20], &vec![Vec::new(); 20]).unwrap();
        assert_eq!(mostpop_scores(&no_clicks), want);
    }

    #[test]
    fn sample_consistency_check() {
        let ds = Dataset::from_index_sets(5, &[vec![1]], &[vec![2]], &[vec![]]).unwrap();
        let part = partition(&ds, 0).unwrap();
        let ok = PairSample {
            user: 0,
            winner: 1,
            loser: 2,
            relation: Relation::PvsC,
        };
        assert!(ok.is_consistent(part));
        assert!(!PairSample {
            relation: Relation::PvsN,
            ..ok
        }
        .is_consistent(part));
        assert_eq!(
            Relation::from_classes(ItemClass::NonClicked, ItemClass::ClickedOnly),
            Some(Relation::NvsC)
        );
        assert_eq!(
            Relation::from_classes(ItemClass::NonClicked, ItemClass::Purchased),
            None
        );
    }
}
