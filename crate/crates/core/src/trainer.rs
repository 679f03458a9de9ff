//! Stochastic gradient ascent over sampled preference pairs, exact
//! full-batch ascent for verification, WMF/MostPop fitting, and the
//! hyperparameter grid search.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interactions::{Dataset, TriPartition};
use crate::latent_model::{init, sigmoid, HyperParams, Method, ModelParams};
use crate::metrics::{evaluate, MetricMeans, METRIC_KEYS};
use crate::objectives::{
    ascend_pair, full_gradient, full_objective, mostpop_scores, schema, total_pair_count, wmf_als_sweep, ClassSet,
    PairSample, Relation,
};

/// Upper bound on the automatic number of ascent steps per epoch.
pub const AUTO_SAMPLES_CAP: u64 = 1_000_000;
/// Default largest pair count allowed in full-batch mode.
pub const DEFAULT_FULL_BATCH_CAP: u64 = 10_000_000;

// Keeps the sampler stream apart from the initialization stream.
const SAMPLER_SEED_OFFSET: u64 = 0x005E_ED0F_5A4D_u64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SamplingMode {
    Stochastic,
    FullBatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SamplesPerEpoch {
    /// Total pair count of the method's objective, capped at [`AUTO_SAMPLES_CAP`].
    Auto,
    Fixed(u64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub hyper: HyperParams,
    pub samples_per_epoch: SamplesPerEpoch,
    pub sampling_mode: SamplingMode,
    /// Epoch interval for progress lines; 0 disables them.
    pub eval_every: usize,
    pub full_batch_cap: u64,
}

impl TrainConfig {
    pub fn new(hyper: HyperParams) -> Self {
        TrainConfig {
            hyper,
            samples_per_epoch: SamplesPerEpoch::Auto,
            sampling_mode: SamplingMode::Stochastic,
            eval_every: 10,
            full_batch_cap: DEFAULT_FULL_BATCH_CAP,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        if self.samples_per_epoch == SamplesPerEpoch::Fixed(0) {
            return Err(Error::Config("samples per epoch must be at least 1".into()));
        }
        Ok(())
    }
}

/// Draws preference pairs for one method: a user uniformly among users with
/// an active pair term, one of that user's active terms uniformly, then a
/// winner and a loser uniformly from the term's two item sets.
pub struct PairSampler<'a> {
    dataset: &'a Dataset,
    users: Vec<u32>,
    terms: Vec<Vec<(ClassSet, ClassSet)>>,
}

impl<'a> PairSampler<'a> {
    pub fn new(dataset: &'a Dataset, method: Method) -> Result<Self> {
        let schema = schema(method)?;
        let mut users = Vec::new();
        let mut terms = Vec::new();
        for (u, part) in dataset.partitions().iter().enumerate() {
            let active: Vec<(ClassSet, ClassSet)> = schema
                .iter()
                .copied()
                .filter(|(w, l)| w.size_in(part) > 0 && l.size_in(part) > 0)
                .collect();
            if !active.is_empty() {
                users.push(u as u32);
                terms.push(active);
            }
        }
        if users.is_empty() {
            return Err(Error::Untrainable(method));
        }
        Ok(PairSampler { dataset, users, terms })
    }

    /// Users with at least one active term.
    pub fn users(&self) -> &[u32] {
        &self.users
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> PairSample {
        let slot = rng.random_range(0..self.users.len());
        let user = self.users[slot];
        let terms = &self.terms[slot];
        let (wset, lset) = terms[rng.random_range(0..terms.len())];
        let part = &self.dataset.partitions()[user as usize];
        let winner = draw_item(wset, part, rng);
        let loser = draw_item(lset, part, rng);
        let relation = Relation::from_classes(part.class_of(winner), part.class_of(loser))
            .expect("schema terms map to concrete relations");
        PairSample {
            user,
            winner,
            loser,
            relation,
        }
    }
}

/// Uniform draw from the user's items in `set`. Sets including non-clicked
/// items use rejection against the explicit sets unless they are a small
/// share of the catalog.
fn draw_item<R: Rng + ?Sized>(set: ClassSet, part: &TriPartition, rng: &mut R) -> u32 {
    let size = set.size_in(part);
    debug_assert!(size > 0);
    if !set.non_clicked {
        let mut idx = rng.random_range(0..size);
        if set.purchased {
            if idx < part.purchased().len() {
                return part.purchased()[idx];
            }
            idx -= part.purchased().len();
        }
        return part.clicked_only()[idx];
    }
    let m = part.universe_size();
    if size * 8 >= m {
        loop {
            let i = rng.random_range(0..m as u32);
            if set.contains(part.class_of(i)) {
                return i;
            }
        }
    }
    let members: Vec<u32> = (0..m as u32).filter(|&i| set.contains(part.class_of(i))).collect();
    members[rng.random_range(0..members.len())]
}

/// One pair drawn with the same policy the trainer uses.
pub fn sample_pair<R: Rng + ?Sized>(dataset: &Dataset, method: Method, rng: &mut R) -> Result<PairSample> {
    Ok(PairSampler::new(dataset, method)?.sample(rng))
}

pub fn resolve_samples_per_epoch(dataset: &Dataset, config: &TrainConfig) -> Result<u64> {
    Ok(match config.samples_per_epoch {
        SamplesPerEpoch::Fixed(n) => n,
        SamplesPerEpoch::Auto => total_pair_count(dataset, config.hyper.method)?.clamp(1, AUTO_SAMPLES_CAP),
    })
}

fn check_finite(params: &ModelParams, epoch: usize) -> Result<()> {
    if params.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { epoch })
    }
}

fn log_progress(config: &TrainConfig, epoch: usize, label: &str, value: f64, started: Instant) {
    if config.eval_every > 0 && (epoch.is_multiple_of(config.eval_every) || epoch == config.hyper.epochs) {
        log::info!(
            "{} epoch {epoch}: {label} {value:.6} ({:.2}s)",
            config.hyper.method,
            started.elapsed().as_secs_f64()
        );
    }
}

/// Fits a model. MostPop returns a one-factor model with zero factors and
/// popularity counts as item biases; WMF runs one ALS sweep per epoch; the
/// pairwise methods run gradient ascent. Output is a pure function of the
/// dataset and config.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<ModelParams> {
    config.validate()?;
    let hyper = &config.hyper;
    let started = Instant::now();
    match hyper.method {
        Method::MostPop => {
            let mut params = ModelParams::zeros(dataset.n(), dataset.m(), 1);
            params.item_bias = mostpop_scores(dataset);
            Ok(params)
        }
        Method::Wmf => {
            let mut params = init(dataset.n(), dataset.m(), hyper)?;
            for epoch in 1..=hyper.epochs {
                params = wmf_als_sweep(&params, dataset, hyper.wmf_alpha, hyper.lambda)?;
                check_finite(&params, epoch)?;
                if config.eval_every > 0 && epoch.is_multiple_of(config.eval_every) {
                    let loss = crate::objectives::wmf_loss(&params, dataset, hyper.wmf_alpha, hyper.lambda);
                    log_progress(config, epoch, "loss", loss, started);
                }
            }
            Ok(params)
        }
        _ => match config.sampling_mode {
            SamplingMode::Stochastic => train_stochastic(dataset, config, started),
            SamplingMode::FullBatch => train_full_batch(dataset, config, started).map(|(p, _)| p),
        },
    }
}

fn train_stochastic(dataset: &Dataset, config: &TrainConfig, started: Instant) -> Result<ModelParams> {
    let hyper = &config.hyper;
    let sampler = PairSampler::new(dataset, hyper.method)?;
    let steps = resolve_samples_per_epoch(dataset, config)?;
    let mut params = init(dataset.n(), dataset.m(), hyper)?;
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed.wrapping_add(SAMPLER_SEED_OFFSET));
    for epoch in 1..=hyper.epochs {
        let mut sum = 0.0;
        for _ in 0..steps {
            let s = sampler.sample(&mut rng);
            sum += ascend_pair(
                &mut params,
                s.user as usize,
                s.winner as usize,
                s.loser as usize,
                hyper.eta,
                hyper.lambda,
            );
        }
        check_finite(&params, epoch)?;
        log_progress(config, epoch, "mean ln sigmoid", sum / steps as f64, started);
    }
    Ok(params)
}

/// Exact ascent on the full objective; also returns the objective total
/// before the first epoch and after each one.
pub fn train_full_batch_trace(dataset: &Dataset, config: &TrainConfig) -> Result<(ModelParams, Vec<f64>)> {
    config.validate()?;
    train_full_batch(dataset, config, Instant::now())
}

fn train_full_batch(dataset: &Dataset, config: &TrainConfig, started: Instant) -> Result<(ModelParams, Vec<f64>)> {
    let hyper = &config.hyper;
    let pairs = total_pair_count(dataset, hyper.method)?;
    if pairs > config.full_batch_cap {
        return Err(Error::Config(format!(
            "full-batch mode needs {pairs} pairs per epoch, above the cap of {}",
            config.full_batch_cap
        )));
    }
    if pairs == 0 {
        return Err(Error::Untrainable(hyper.method));
    }
    let mut params = init(dataset.n(), dataset.m(), hyper)?;
    let mut trace = vec![full_objective(&params, dataset, hyper.method, hyper.lambda)?.total];
    for epoch in 1..=hyper.epochs {
        let grad = full_gradient(&params, dataset, hyper.method, hyper.lambda)?;
        for (p, g) in params.user_factors.iter_mut().zip(&grad.user_factors) {
            *p += hyper.eta * g;
        }
        for (p, g) in params.item_factors.iter_mut().zip(&grad.item_factors) {
            *p += hyper.eta * g;
        }
        for (p, g) in params.item_bias.iter_mut().zip(&grad.item_bias) {
            *p += hyper.eta * g;
        }
        check_finite(&params, epoch)?;
        let total = full_objective(&params, dataset, hyper.method, hyper.lambda)?.total;
        trace.push(total);
        log_progress(config, epoch, "objective", total, started);
    }
    Ok((params, trace))
}

struct SharedParams {
    k: usize,
    user: Vec<AtomicU64>,
    item: Vec<AtomicU64>,
    bias: Vec<AtomicU64>,
}

#[inline]
fn ld(v: &AtomicU64) -> f64 {
    f64::from_bits(v.load(Ordering::Relaxed))
}

#[inline]
fn st(v: &AtomicU64, x: f64) {
    v.store(x.to_bits(), Ordering::Relaxed)
}

impl SharedParams {
    fn new(p: &ModelParams) -> Self {
        let wrap = |v: &[f64]| v.iter().map(|x| AtomicU64::new(x.to_bits())).collect();
        SharedParams {
            k: p.k(),
            user: wrap(&p.user_factors),
            item: wrap(&p.item_factors),
            bias: wrap(&p.item_bias),
        }
    }

    fn into_params(self, n: usize, m: usize) -> Result<ModelParams> {
        let unwrap = |v: Vec<AtomicU64>| v.into_iter().map(|a| f64::from_bits(a.into_inner())).collect();
        ModelParams::from_parts(n, m, self.k, unwrap(self.user), unwrap(self.item), unwrap(self.bias))
    }

    fn ascend(&self, s: &PairSample, eta: f64, lambda: f64) {
        let k = self.k;
        let (u, w, l) = (s.user as usize * k, s.winner as usize * k, s.loser as usize * k);
        let mut d = ld(&self.bias[s.winner as usize]) - ld(&self.bias[s.loser as usize]);
        for f in 0..k {
            d += ld(&self.user[u + f]) * (ld(&self.item[w + f]) - ld(&self.item[l + f]));
        }
        let g = 1.0 - sigmoid(d);
        for f in 0..k {
            let a = ld(&self.user[u + f]);
            let bw = ld(&self.item[w + f]);
            let bl = ld(&self.item[l + f]);
            st(&self.user[u + f], a + eta * (g * (bw - bl) - lambda * a));
            st(&self.item[w + f], bw + eta * (g * a - lambda * bw));
            st(&self.item[l + f], bl + eta * (-g * a - lambda * bl));
        }
        let gw = ld(&self.bias[s.winner as usize]);
        let gl = ld(&self.bias[s.loser as usize]);
        st(&self.bias[s.winner as usize], gw + eta * (g - lambda * gw));
        st(&self.bias[s.loser as usize], gl + eta * (-g - lambda * gl));
    }
}

/// Lock-free parallel stochastic ascent: `threads` samplers apply
/// unsynchronized single-pair updates to shared parameters. Updates may race,
/// so results are not reproducible run to run. Non-pairwise methods and
/// full-batch mode fall back to [`train`].
pub fn train_parallel(dataset: &Dataset, config: &TrainConfig, threads: usize) -> Result<ModelParams> {
    config.validate()?;
    let hyper = &config.hyper;
    if threads <= 1 || !hyper.method.is_pairwise() || config.sampling_mode == SamplingMode::FullBatch {
        return train(dataset, config);
    }
    let sampler = PairSampler::new(dataset, hyper.method)?;
    let steps = resolve_samples_per_epoch(dataset, config)?;
    let per_thread = steps.div_ceil(threads as u64);
    let shared = SharedParams::new(&init(dataset.n(), dataset.m(), hyper)?);
    let mut rngs: Vec<ChaCha8Rng> = (0..threads as u64)
        .map(|t| ChaCha8Rng::seed_from_u64(hyper.seed.wrapping_add(SAMPLER_SEED_OFFSET).wrapping_add(t)))
        .collect();
    for epoch in 1..=hyper.epochs {
        std::thread::scope(|scope| {
            for rng in rngs.iter_mut() {
                let (sampler, shared) = (&sampler, &shared);
                scope.spawn(move || {
                    for _ in 0..per_thread {
                        shared.ascend(&sampler.sample(rng), hyper.eta, hyper.lambda);
                    }
                });
            }
        });
        if shared
            .user
            .iter()
            .chain(&shared.item)
            .chain(&shared.bias)
            .any(|v| !ld(v).is_finite())
        {
            return Err(Error::Divergence { epoch });
        }
    }
    shared.into_params(dataset.n(), dataset.m())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub k_values: Vec<usize>,
    pub eta_values: Vec<f64>,
    pub lambda_values: Vec<f64>,
    /// Runs per cell, seeded `base_seed + 0 .. base_seed + n_seeds - 1`.
    pub n_seeds: usize,
    pub base_seed: u64,
    pub epochs: usize,
    pub cutoff: usize,
    pub wmf_alpha: f64,
    pub samples_per_epoch: SamplesPerEpoch,
}

impl Default for GridSpec {
    /// K in 10..=200 step 10, eta and lambda in {0.01, 0.05, 0.1}, five seeds.
    fn default() -> Self {
        GridSpec {
            k_values: (1..=20).map(|i| i * 10).collect(),
            eta_values: vec![0.01, 0.05, 0.1],
            lambda_values: vec![0.01, 0.05, 0.1],
            n_seeds: 5,
            base_seed: 0,
            epochs: 100,
            cutoff: crate::metrics::DEFAULT_CUTOFF,
            wmf_alpha: 40.0,
            samples_per_epoch: SamplesPerEpoch::Auto,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k_values.is_empty() || self.eta_values.is_empty() || self.lambda_values.is_empty() {
            return Err(Error::Config("grid has an empty axis".into()));
        }
        if self.n_seeds == 0 {
            return Err(Error::Config("grid needs at least one seed".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub k: usize,
    pub eta: f64,
    pub lambda: f64,
    /// Holdout metrics of each seed's run, in seed order.
    pub per_seed: Vec<MetricMeans>,
    pub mean: MetricMeans,
    /// Sample standard deviation over seeds (0 with a single seed).
    pub std: MetricMeans,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridResult {
    pub best: HyperParams,
    pub cells: Vec<GridCell>,
}

pub fn mean_and_std(runs: &[MetricMeans]) -> (MetricMeans, MetricMeans) {
    let count = runs.len() as f64;
    let mut mean = [0.0; 6];
    for r in runs {
        for (m, v) in mean.iter_mut().zip(r.to_array()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut std = [0.0; 6];
    if runs.len() > 1 {
        for r in runs {
            for ((s, v), m) in std.iter_mut().zip(r.to_array()).zip(mean) {
                *s += (v - m).powi(2);
            }
        }
        std.iter_mut().for_each(|s| *s = (*s / (count - 1.0)).sqrt());
    }
    (MetricMeans::from_array(mean), MetricMeans::from_array(std))
}

/// Picks the cell with the highest mean AUC; ties go to smaller K, then
/// smaller eta, then smaller lambda.
pub fn select_best(cells: &[GridCell]) -> Option<&GridCell> {
    cells.iter().min_by(|a, b| {
        b.mean
            .auc
            .total_cmp(&a.mean.auc)
            .then(a.k.cmp(&b.k))
            .then(a.eta.total_cmp(&b.eta))
            .then(a.lambda.total_cmp(&b.lambda))
    })
}

/// Trains `n_seeds` models per grid cell on `dataset` and scores each on
/// `holdout`, which must share the dataset's user and item indexing.
pub fn grid_search(dataset: &Dataset, holdout: &Dataset, grid: &GridSpec, method: Method) -> Result<GridResult> {
    grid.validate()?;
    if holdout.train().users() != dataset.train().users() || holdout.train().items() != dataset.train().items() {
        return Err(Error::Config(
            "holdout must share the training dataset's user and item ids".into(),
        ));
    }
    let mut combos = Vec::new();
    for &k in &grid.k_values {
        for &eta in &grid.eta_values {
            for &lambda in &grid.lambda_values {
                combos.push((k, eta, lambda));
            }
        }
    }
    let runs: Vec<(usize, u64)> = (0..combos.len())
        .flat_map(|c| (0..grid.n_seeds as u64).map(move |s| (c, s)))
        .collect();
    let results: Vec<MetricMeans> = runs
        .par_iter()
        .map(|&(c, s)| {
            let (k, eta, lambda) = combos[c];
            let config = TrainConfig {
                eval_every: 0,
                samples_per_epoch: grid.samples_per_epoch,
                ..TrainConfig::new(HyperParams {
                    k,
                    eta,
                    lambda,
                    epochs: grid.epochs,
                    seed: grid.base_seed + s,
                    method,
                    wmf_alpha: grid.wmf_alpha,
                })
            };
            let params = train(dataset, &config)?;
            Ok(evaluate(holdout, &params, grid.cutoff)?.means)
        })
        .collect::<Result<_>>()?;

    let cells: Vec<GridCell> = combos
        .iter()
        .zip(results.chunks(grid.n_seeds))
        .map(|(&(k, eta, lambda), per_seed)| {
            let (mean, std) = mean_and_std(per_seed);
            GridCell {
                k,
                eta,
                lambda,
                per_seed: per_seed.to_vec(),
                mean,
                std,
            }
        })
        .collect();
    let best = select_best(&cells).expect("grid is nonempty");
    let best = HyperParams {
        k: best.k,
        eta: best.eta,
        lambda: best.lambda,
        epochs: grid.epochs,
        seed: grid.base_seed,
        method,
        wmf_alpha: grid.wmf_alpha,
    };
    Ok(GridResult { best, cells })
}

/// Grid table as TSV: K, eta, lambda, seeds, then mean and std per metric.
pub fn grid_tsv(cells: &[GridCell]) -> String {
    let mut out = String::from("K\teta\tlambda\tseeds");
    for key in METRIC_KEYS {
        out.push_str(&format!("\tmean_{key}\tstd_{key}"));
    }
    out.push('\n');
    for c in cells {
        out.push_str(&format!("{}\t{}\t{}\t{}", c.k, c.eta, c.lambda, c.per_seed.len()));
        for (m, s) in c.mean.to_array().iter().zip(c.std.to_array()) {
            out.push_str(&format!("\t{m:.6}\t{s:.6}"));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interactions::partition;
    use crate::pipeline::{chronological_split, generate_synthetic, tiny_instance, SplitConfig, SynthConfig};
    use std::collections::HashMap;

    fn hyper(method: Method) -> HyperParams {
        HyperParams {
            k: 2,
            eta: 0.01,
            lambda: 0.01,
            epochs: 100,
            seed: 1,
            method,
            wmf_alpha: 40.0,
        }
    }

    #[test]
    fn p3s1_sampler_is_uniform_over_losers() {
        let ds = Dataset::from_index_sets(6, &[vec![1]], &[vec![]], &[vec![]]).unwrap();
        let sampler = PairSampler::new(&ds, Method::P3s1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut counts: HashMap<u32, usize> = HashMap::new();
        let draws = 30_000;
        for _ in 0..draws {
            let s = sampler.sample(&mut rng);
            assert_eq!(s.winner, 1);
            *counts.entry(s.loser).or_default() += 1;
        }
        // Losers are the five non-clicked items; chi-square with 4 dof,
        // 0.999 quantile 18.47.
        assert_eq!(counts.len(), 5);
        let expected = draws as f64 / 5.0;
        let chi2: f64 = counts.values().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 18.47, "chi2 {chi2}: {counts:?}");
    }

    #[test]
    fn p3s2_skips_users_without_clicked_only_items() {
        let ds = Dataset::from_index_sets(5, &[vec![0], vec![1]], &[vec![], vec![2]], &[vec![], vec![]]).unwrap();
        let sampler = PairSampler::new(&ds, Method::P3s2).unwrap();
        assert_eq!(sampler.users(), &[1]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            assert_eq!(sampler.sample(&mut rng).user, 1);
        }
    }

    #[test]
    fn samples_respect_relation_classes() {
        let (log, _) = generate_synthetic(&SynthConfig {
            n: 30,
            m: 60,
            clicks_per_user: 12,
            purchases_per_user: 4,
            seed: 2,
            ..SynthConfig::default()
        })
        .unwrap();
        let ds = chronological_split(&log, &SplitConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for method in [Method::Bpr, Method::P3s1, Method::P3s2, Method::P3s3] {
            let sampler = PairSampler::new(&ds, method).unwrap();
            for _ in 0..25_000 {
                let s = sampler.sample(&mut rng);
                assert!(
                    s.is_consistent(partition(&ds, s.user as usize).unwrap()),
                    "{method}: {s:?}"
                );
                let allowed: &[Relation] = match method {
                    Method::Bpr => &[Relation::PvsN, Relation::PvsC],
                    Method::P3s1 => &[Relation::PvsN],
                    Method::P3s2 => &[Relation::PvsC, Relation::CvsN],
                    Method::P3s3 => &[Relation::PvsC, Relation::NvsC],
                    _ => unreachable!(),
                };
                assert!(allowed.contains(&s.relation));
            }
        }
    }

    #[test]
    fn small_non_clicked_sets_are_enumerated() {
        // Only one non-clicked item out of 20.
        let clicks: Vec<u32> = (1..19).collect();
        let ds = Dataset::from_index_sets(20, &[vec![0]], &[clicks], &[vec![]]).unwrap();
        let sampler = PairSampler::new(&ds, Method::P3s1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            assert_eq!(sampler.sample(&mut rng).loser, 19);
        }
    }

    #[test]
    fn untrainable_dataset() {
        let ds = Dataset::from_index_sets(3, &[vec![], vec![]], &[vec![0], vec![1]], &[vec![], vec![]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_pair(&ds, Method::Bpr, &mut rng),
            Err(Error::Untrainable(Method::Bpr))
        ));
        assert!(matches!(
            train(&ds, &TrainConfig::new(hyper(Method::P3s1))),
            Err(Error::Untrainable(_))
        ));
    }

    #[test]
    fn full_batch_ascends_on_tiny_instance() {
        let ds = tiny_instance();
        let config = TrainConfig {
            sampling_mode: SamplingMode::FullBatch,
            ..TrainConfig::new(hyper(Method::P3s2))
        };
        let (params, trace) = train_full_batch_trace(&ds, &config).unwrap();
        assert_eq!(trace.len(), 101);
        assert!(trace[100] > trace[0]);
        for w in trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-9);
        }
        assert_eq!(train(&ds, &config).unwrap(), params);
    }

    #[test]
    fn full_batch_respects_pair_cap() {
        let ds = tiny_instance();
        let config = TrainConfig {
            sampling_mode: SamplingMode::FullBatch,
            full_batch_cap: 3,
            ..TrainConfig::new(hyper(Method::Bpr))
        };
        assert!(matches!(train(&ds, &config), Err(Error::Config(_))));
    }

    #[test]
    fn stochastic_training_is_deterministic() {
        let ds = tiny_instance();
        let config = TrainConfig {
            samples_per_epoch: SamplesPerEpoch::Fixed(50),
            ..TrainConfig::new(HyperParams {
                epochs: 20,
                ..hyper(Method::P3s2)
            })
        };
        let a = train(&ds, &config).unwrap();
        let b = train(&ds, &config).unwrap();
        assert_eq!(
            crate::pipeline::encode_checkpoint(&a),
            crate::pipeline::encode_checkpoint(&b)
        );
        let other = TrainConfig {
            hyper: HyperParams {
                seed: 2,
                ..config.hyper.clone()
            },
            ..config.clone()
        };
        assert_ne!(train(&ds, &other).unwrap(), a);
    }

    #[test]
    fn divergence_is_reported() {
        let ds = tiny_instance();
        let config = TrainConfig {
            samples_per_epoch: SamplesPerEpoch::Fixed(200),
            ..TrainConfig::new(HyperParams {
                eta: 1e300,
                lambda: 1.0,
                epochs: 5,
                ..hyper(Method::Bpr)
            })
        };
        assert!(matches!(train(&ds, &config), Err(Error::Divergence { epoch: 1 })));
    }

    #[test]
    fn mostpop_ignores_hyperparameters() {
        let ds = tiny_instance();
        let a = train(&ds, &TrainConfig::new(hyper(Method::MostPop))).unwrap();
        let b = train(
            &ds,
            &TrainConfig::new(HyperParams {
                k: 50,
                eta: 0.1,
                lambda: 0.1,
                ..hyper(Method::MostPop)
            }),
        )
        .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.item_bias, mostpop_scores(&ds));
    }

    #[test]
    fn wmf_training_lowers_loss() {
        let ds = tiny_instance();
        let h = HyperParams {
            epochs: 5,
            lambda: 0.1,
            ..hyper(Method::Wmf)
        };
        let start = init(ds.n(), ds.m(), &h).unwrap();
        let trained = train(&ds, &TrainConfig::new(h.clone())).unwrap();
        let loss = |p: &ModelParams| crate::objectives::wmf_loss(p, &ds, h.wmf_alpha, h.lambda);
        assert!(loss(&trained) < loss(&start));
        assert!(trained.item_bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn parallel_training_stays_finite() {
        let (log, _) = generate_synthetic(&SynthConfig {
            n: 40,
            m: 80,
            seed: 6,
            ..SynthConfig::default()
        })
        .unwrap();
        let ds = chronological_split(&log, &SplitConfig::default()).unwrap();
        let config = TrainConfig {
            samples_per_epoch: SamplesPerEpoch::Fixed(20_000),
            ..TrainConfig::new(HyperParams {
                k: 8,
                eta: 0.05,
                epochs: 5,
                ..hyper(Method::P3s2)
            })
        };
        let p = train_parallel(&ds, &config, 4).unwrap();
        assert!(p.is_finite());
        assert_eq!((p.n(), p.m(), p.k()), (40, 80, 8));
        // Single thread falls back to the deterministic trainer.
        assert_eq!(train_parallel(&ds, &config, 1).unwrap(), train(&ds, &config).unwrap());
    }

    #[test]
    fn auto_samples_match_pair_count() {
        let ds = tiny_instance();
        let config = TrainConfig::new(hyper(Method::P3s2));
        assert_eq!(
            resolve_samples_per_epoch(&ds, &config).unwrap(),
            total_pair_count(&ds, Method::P3s2).unwrap()
        );
    }

    fn cell(k: usize, eta: f64, lambda: f64, auc: f64) -> GridCell {
        let m = MetricMeans {
            auc,
            ..Default::default()
        };
        GridCell {
            k,
            eta,
            lambda,
            per_seed: vec![m],
            mean: m,
            std: MetricMeans::default(),
        }
    }

    #[test]
    fn selection_prefers_auc_then_small_settings() {
        let cells = vec![
            cell(20, 0.01, 0.01, 0.7),
            cell(10, 0.05, 0.01, 0.7),
            cell(10, 0.01, 0.1, 0.7),
            cell(30, 0.1, 0.1, 0.6),
        ];
        let best = select_best(&cells).unwrap();
        assert_eq!((best.k, best.eta, best.lambda), (10, 0.01, 0.1));
        let mut reversed = cells.clone();
        reversed.reverse();
        assert_eq!(select_best(&reversed).unwrap(), best);
        let dominant = vec![cell(10, 0.01, 0.01, 0.5), cell(200, 0.1, 0.1, 0.9)];
        assert_eq!(select_best(&dominant).unwrap().k, 200);
    }

    #[test]
    fn mean_and_std_recompute() {
        let runs = [
            MetricMeans::from_array([0.1, 0.2, 0.3, 0.4, 0.5, 0.6]),
            MetricMeans::from_array([0.3, 0.2, 0.1, 0.0, 0.5, 0.8]),
        ];
        let (mean, std) = mean_and_std(&runs);
        let m = mean.to_array();
        let s = std.to_array();
        for c in 0..6 {
            let a = runs[0].to_array()[c];
            let b = runs[1].to_array()[c];
            assert!((m[c] - (a + b) / 2.0).abs() < 1e-15);
            assert!((s[c] - (a - b).abs() / 2f64.sqrt()).abs() < 1e-12);
        }
        let (_, single) = mean_and_std(&runs[..1]);
        assert_eq!(single, MetricMeans::default());
    }

    #[test]
    fn grid_defaults_and_validation() {
        let g = GridSpec::default();
        assert_eq!(g.k_values.len(), 20);
        assert_eq!((g.k_values[0], g.k_values[19]), (10, 200));
        assert_eq!(g.eta_values, vec![0.01, 0.05, 0.1]);
        assert_eq!(g.lambda_values, vec![0.01, 0.05, 0.1]);
        assert_eq!(g.n_seeds, 5);
        assert!(GridSpec {
            k_values: vec![],
            ..g.clone()
        }
        .validate()
        .is_err());
        let ds = tiny_instance();
        assert!(grid_search(
            &ds,
            &ds,
            &GridSpec {
                eta_values: vec![],
                ..g
            },
            Method::Bpr
        )
        .is_err());
    }

    #[test]
    fn one_cell_grid() {
        let ds = tiny_instance();
        let grid = GridSpec {
            k_values: vec![2],
            eta_values: vec![0.05],
            lambda_values: vec![0.01],
            n_seeds: 3,
            epochs: 3,
            samples_per_epoch: SamplesPerEpoch::Fixed(100),
            ..GridSpec::default()
        };
        let result = grid_search(&ds, &ds, &grid, Method::Bpr).unwrap();
        assert_eq!(result.cells.len(), 1);
        assert_eq!((result.best.k, result.best.eta, result.best.lambda), (2, 0.05, 0.01));
        let c = &result.cells[0];
        assert_eq!(c.per_seed.len(), 3);
        let (mean, std) = mean_and_std(&c.per_seed);
        assert_eq!((mean, std), (c.mean, c.std));
        let tsv = grid_tsv(&result.cells);
        assert_eq!(tsv.lines().count(), 2);
        assert_eq!(tsv.lines().next().unwrap().split('\t').count(), 16);
    }
}
