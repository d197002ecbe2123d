//! Evaluation of patch orderings.
//!
//! Exact cumulative conditional entropy along an order, a sequential
//! prediction analogue of autoregressive generation, the training-order
//! sampler, the mask-rate schedule, and a masked-classification analogue
//! with area-under-curve and knee metrics.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::collapse_rank::CollapseRanking;
use crate::error::{CollapseError, Result};
use crate::gaussian_field::{ConditionalPredictor, GaussianModel};
use crate::seed;

/// Fails unless `order` is a permutation of `0..n`.
pub fn check_permutation(order: &[usize], n: usize) -> Result<()> {
    if order.len() != n {
        return Err(CollapseError::DimensionMismatch {
            expected: n,
            got: order.len(),
        });
    }
    let mut seen = vec![false; n];
    for &p in order {
        if p >= n || seen[p] {
            return Err(CollapseError::InvalidArgument(format!(
                "order is not a permutation of 0..{n} (entry {p})"
            )));
        }
        seen[p] = true;
    }
    Ok(())
}

/// `H_c(S) = Σ_n H(e_n | S)` where `S` is the first `prefix_len` patches of
/// `order`; realized patches contribute zero.
pub fn cumulative_entropy(
    model: &GaussianModel,
    order: &[usize],
    prefix_len: usize,
) -> Result<f64> {
    let n = model.n_patches();
    check_permutation(order, n)?;
    if prefix_len > n {
        return Err(CollapseError::InvalidArgument(format!(
            "prefix length {prefix_len} exceeds {n} patches"
        )));
    }
    let mut observed = vec![false; n];
    for &p in &order[..prefix_len] {
        observed[p] = true;
    }
    Ok(model.entropy_profile(&observed)?.iter().sum())
}

/// `H_c` after each prefix length `1..=N`.
pub fn prefix_entropies(model: &GaussianModel, order: &[usize]) -> Result<Vec<f64>> {
    (1..=model.n_patches())
        .map(|k| cumulative_entropy(model, order, k))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingReport {
    pub ordering_name: String,
    /// `H_c` after prefixes of length `1..=N`.
    pub prefix_entropies: Vec<f64>,
    /// Mean L1 error predicting the `k`-th patch from its predecessors.
    pub position_l1: Vec<f64>,
    /// Mean over fields of the per-field average L1 error.
    pub sequential_l1: f64,
    /// Standard error of `sequential_l1` across fields.
    pub sequential_l1_se: f64,
    /// Number of Monte Carlo fields.
    pub seeds: usize,
}

impl OrderingReport {
    /// 95% normal interval for `sequential_l1`.
    pub fn l1_interval(&self) -> (f64, f64) {
        let half = 1.96 * self.sequential_l1_se;
        (self.sequential_l1 - half, self.sequential_l1 + half)
    }
}

pub fn random_permutation(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

fn evaluate_order(
    model: &GaussianModel,
    name: String,
    order: &[usize],
    fields: &[crate::gaussian_field::PatchField],
) -> Result<OrderingReport> {
    let n = model.n_patches();
    check_permutation(order, n)?;
    let predictors = (0..n)
        .map(|k| ConditionalPredictor::new(model, order[k], &order[..k]))
        .collect::<Result<Vec<_>>>()?;
    let mut per_field = Vec::with_capacity(fields.len());
    let mut position_l1 = vec![0.0; n];
    for field in fields {
        let mut total = 0.0;
        for (k, predictor) in predictors.iter().enumerate() {
            let pred = predictor.predict(field)?;
            let actual = field.patch(predictor.target());
            let err: f64 = (actual - pred).abs().sum();
            position_l1[k] += err;
            total += err;
        }
        per_field.push(total / n as f64);
    }
    let m = fields.len() as f64;
    for v in &mut position_l1 {
        *v /= m;
    }
    let mean = per_field.iter().sum::<f64>() / m;
    let var = if fields.len() > 1 {
        per_field.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0)
    } else {
        0.0
    };
    Ok(OrderingReport {
        ordering_name: name,
        prefix_entropies: prefix_entropies(model, order)?,
        position_l1,
        sequential_l1: mean,
        sequential_l1_se: (var / m).sqrt(),
        seeds: fields.len(),
    })
}

/// Scores each named order plus `n_random` random orders (named
/// `random/<k>`). All orders are scored on the same `n_fields` sampled
/// fields.
pub fn compare_orders(
    model: &GaussianModel,
    orders: &[(String, Vec<usize>)],
    n_random: usize,
    n_fields: usize,
    seed: u64,
) -> Result<Vec<OrderingReport>> {
    if n_fields == 0 {
        return Err(CollapseError::InvalidArgument(
            "n_fields must be at least 1".into(),
        ));
    }
    let n = model.n_patches();
    let fields = model.sample_batch(n_fields, seed::derive_seed(seed, "compare/fields"));
    let mut rng = seed::rng_for(seed, "compare/random-orders");
    let mut all: Vec<(String, Vec<usize>)> = orders.to_vec();
    for k in 0..n_random {
        all.push((format!("random/{k}"), random_permutation(n, &mut rng)));
    }
    all.into_par_iter()
        .map(|(name, order)| evaluate_order(model, name, &order, &fields))
        .collect()
}

/// Pointwise mean of the prefix entropies of reports whose name starts
/// with `random/`.
pub fn mean_random_prefix_entropies(reports: &[OrderingReport]) -> Option<Vec<f64>> {
    let random: Vec<&OrderingReport> = reports
        .iter()
        .filter(|r| r.ordering_name.starts_with("random/"))
        .collect();
    let first = random.first()?;
    let mut mean = vec![0.0; first.prefix_entropies.len()];
    for r in &random {
        for (m, v) in mean.iter_mut().zip(&r.prefix_entropies) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= random.len() as f64;
    }
    Some(mean)
}

/// Share of sampled sequences replaced by a uniformly random order.
pub const RANDOM_ORDER_PROB: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingOrder {
    pub order: Vec<usize>,
    /// The last `mask_count` entries of `order` are the masked patches.
    pub mask_count: usize,
    pub randomized: bool,
}

impl TrainingOrder {
    pub fn masked(&self) -> &[usize] {
        &self.order[self.order.len() - self.mask_count..]
    }
}

/// With probability 0.9 the collapse order (high rank first, so the
/// `mask_count` lowest-ranked patches come last); otherwise a uniformly
/// random permutation.
pub fn sample_training_order(
    ranking: &CollapseRanking,
    mask_count: usize,
    rng_seed: u64,
) -> Result<TrainingOrder> {
    let n = ranking.n();
    if mask_count > n {
        return Err(CollapseError::InvalidArgument(format!(
            "mask_count {mask_count} exceeds {n} patches"
        )));
    }
    let mut rng = seed::rng(rng_seed);
    let randomized = rng.random::<f64>() < RANDOM_ORDER_PROB;
    let order = if randomized {
        random_permutation(n, &mut rng)
    } else {
        ranking.order.clone()
    };
    Ok(TrainingOrder {
        order,
        mask_count,
        randomized,
    })
}

/// Number of masked patches for one training sample, uniform on `0..n`.
pub fn sample_mask_count(n: usize, rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(0..n)
}

/// `max_rate · (1 − cos(πu/2))`; uniform `u` puts more mass on low rates.
pub fn mask_rate_schedule(u: f64, max_rate: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&u) {
        return Err(CollapseError::InvalidArgument(format!(
            "u = {u} outside [0, 1]"
        )));
    }
    if !(max_rate > 0.0 && max_rate <= 0.99) {
        return Err(CollapseError::InvalidArgument(format!(
            "max_rate = {max_rate} outside (0, 0.99]"
        )));
    }
    Ok(max_rate * (1.0 - (std::f64::consts::FRAC_PI_2 * u).cos()))
}

/// Patches kept at mask `rate`: `⌈(1 − rate)·n⌉`, at least one.
pub fn keep_count(rate: f64, n: usize) -> usize {
    let kept = ((1.0 - rate) * n as f64 - 1e-9).ceil();
    (kept.max(1.0) as usize).min(n)
}

/// Uniform grid of `points` rates over `[0, max_rate]`.
pub fn rate_grid(points: usize, max_rate: f64) -> Vec<f64> {
    if points < 2 {
        return vec![0.0];
    }
    (0..points)
        .map(|i| {
            if i == points - 1 {
                max_rate
            } else {
                max_rate * i as f64 / (points - 1) as f64
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Knee {
    pub rate: f64,
    pub index: usize,
    /// False when the difference curve never rises above zero (no knee).
    pub found: bool,
    /// False when the curve ends higher than it starts.
    pub decreasing: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskRateCurve {
    pub rates: Vec<f64>,
    pub accuracy: Vec<f64>,
    pub auc: f64,
    pub knee_rate: f64,
    pub knee_found: bool,
}

impl MaskRateCurve {
    pub fn new(rates: Vec<f64>, accuracy: Vec<f64>) -> Result<Self> {
        check_curve(&rates, &accuracy, 2)?;
        let auc = auc_over_masks(&rates, &accuracy)?;
        let (knee_rate, knee_found) = if rates.len() >= 3 {
            let knee = find_knee(&rates, &accuracy)?;
            (knee.rate, knee.found)
        } else {
            (rates[0], false)
        };
        Ok(MaskRateCurve {
            rates,
            accuracy,
            auc,
            knee_rate,
            knee_found,
        })
    }
}

fn check_curve(rates: &[f64], values: &[f64], min_points: usize) -> Result<()> {
    if rates.len() != values.len() {
        return Err(CollapseError::DimensionMismatch {
            expected: rates.len(),
            got: values.len(),
        });
    }
    if rates.len() < min_points {
        return Err(CollapseError::InvalidArgument(format!(
            "curve needs at least {min_points} points, got {}",
            rates.len()
        )));
    }
    if rates.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(CollapseError::InvalidArgument(
            "rates must be strictly increasing".into(),
        ));
    }
    Ok(())
}

/// Trapezoidal integral of accuracy over rate divided by the rate span.
pub fn auc_over_masks(rates: &[f64], accuracy: &[f64]) -> Result<f64> {
    check_curve(rates, accuracy, 2)?;
    let area: f64 = rates
        .windows(2)
        .zip(accuracy.windows(2))
        .map(|(r, a)| (r[1] - r[0]) * (a[0] + a[1]) / 2.0)
        .sum();
    Ok(area / (rates[rates.len() - 1] - rates[0]))
}

/// Kneedle for a concave decreasing curve: after min-max normalization of
/// both axes, the knee maximizes `y + x − 1`, the gap between the curve
/// and the diagonal from `(0, 1)` to `(1, 0)`. Ties go to the smallest rate.
pub fn find_knee(rates: &[f64], accuracy: &[f64]) -> Result<Knee> {
    check_curve(rates, accuracy, 3)?;
    let (x0, x1) = (rates[0], rates[rates.len() - 1]);
    let y_min = accuracy.iter().copied().fold(f64::INFINITY, f64::min);
    let y_max = accuracy.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let decreasing = accuracy[accuracy.len() - 1] <= accuracy[0];
    if y_max == y_min {
        return Ok(Knee {
            rate: x0,
            index: 0,
            found: false,
            decreasing,
        });
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (i, (&x, &y)) in rates.iter().zip(accuracy).enumerate() {
        let xn = (x - x0) / (x1 - x0);
        let yn = (y - y_min) / (y_max - y_min);
        let diff = yn + xn - 1.0;
        if diff > best.1 + 1e-12 {
            best = (i, diff);
        }
    }
    let found = best.1 > 1e-9;
    let index = if found { best.0 } else { 0 };
    Ok(Knee {
        rate: rates[index],
        index,
        found,
        decreasing,
    })
}

/// Two class-conditional models sharing `base`'s covariance; class 1's mean
/// is shifted by `strength` marginal standard deviations on every
/// coordinate of `signal_patches`.
pub fn planted_class_pair(
    base: &GaussianModel,
    signal_patches: &[usize],
    strength: f64,
) -> Result<(GaussianModel, GaussianModel)> {
    let d = base.patch_dim();
    let mut shifted = base.mean().clone();
    for &p in signal_patches {
        if p >= base.n_patches() {
            return Err(CollapseError::InvalidArgument(format!(
                "signal patch {p} out of range"
            )));
        }
        for k in 0..d {
            let c = p * d + k;
            shifted[c] += strength * base.covariance()[(c, c)].sqrt();
        }
    }
    Ok((base.clone(), base.with_mean(shifted)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    /// Training samples per class.
    pub n_train: usize,
    /// Test samples per class.
    pub n_test: usize,
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
    /// Upper end of the training mask-rate schedule.
    pub max_rate: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            n_train: 2000,
            n_test: 1000,
            epochs: 300,
            lr: 0.5,
            l2: 1e-4,
            max_rate: 0.99,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierEval {
    pub collapse: MaskRateCurve,
    pub random: MaskRateCurve,
    /// Accuracy at the lowest rate is near chance; ordering claims should
    /// not be drawn from this run.
    pub degenerate: bool,
}

const DEGENERATE_ACCURACY: f64 = 0.55;

/// Zero-imputed patch values followed by one keep indicator per patch.
fn masked_features(values: &DVector<f64>, n: usize, d: usize, kept: &[usize]) -> DVector<f64> {
    let mut x = DVector::zeros(n * d + n);
    for &p in kept {
        for k in 0..d {
            x[p * d + k] = values[p * d + k];
        }
        x[n * d + p] = 1.0;
    }
    x
}

/// Two-class softmax regression trained by full-batch gradient descent.
struct SoftmaxClassifier {
    weights: DMatrix<f64>, // classes × features
    bias: DVector<f64>,
}

impl SoftmaxClassifier {
    fn fit(x: &DMatrix<f64>, labels: &[usize], classes: usize, config: &ClassifierConfig) -> Self {
        let (m, f) = x.shape();
        let mut weights = DMatrix::zeros(classes, f);
        let mut bias = DVector::zeros(classes);
        for _ in 0..config.epochs {
            let mut logits = x * weights.transpose();
            for mut row in logits.row_iter_mut() {
                row += bias.transpose();
            }
            let mut grad_logits = DMatrix::zeros(m, classes);
            for i in 0..m {
                let row = logits.row(i);
                let max = row.max();
                let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
                for c in 0..classes {
                    let p = (row[c] - max).exp() / z;
                    grad_logits[(i, c)] = (p - (labels[i] == c) as u8 as f64) / m as f64;
                }
            }
            let grad_w = grad_logits.transpose() * x + &weights * config.l2;
            let grad_b = grad_logits.row_sum().transpose();
            weights -= grad_w * config.lr;
            bias -= grad_b * config.lr;
        }
        SoftmaxClassifier { weights, bias }
    }

    fn predict(&self, x: &DVector<f64>) -> usize {
        let scores = &self.weights * x + &self.bias;
        scores.argmax().0
    }
}

fn random_subset(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut all: Vec<usize> = (0..n).collect();
    all.shuffle(rng);
    all.truncate(k);
    all
}

/// Trains one masking-aware linear classifier on a 50/50 mix of
/// collapse-masked and random-masked samples (mask rates drawn from the
/// cosine schedule), then scores it at each rate keeping either the
/// highest-ranked patches or a random subset of the same size.
pub fn masked_classifier_eval(
    classes: (&GaussianModel, &GaussianModel),
    ranking: &CollapseRanking,
    config: &ClassifierConfig,
    rates: &[f64],
) -> Result<ClassifierEval> {
    let (m0, m1) = classes;
    let n = m0.n_patches();
    let d = m0.patch_dim();
    if m1.n_patches() != n || m1.patch_dim() != d || ranking.n() != n {
        return Err(CollapseError::DimensionMismatch {
            expected: n,
            got: m1.n_patches().max(ranking.n()),
        });
    }
    if m0.precision() != m1.precision() {
        return Err(CollapseError::InvalidArgument(
            "class models must share a covariance".into(),
        ));
    }
    check_curve(rates, rates, 2)?;
    if rates.iter().any(|r| !(0.0..=0.99).contains(r)) {
        return Err(CollapseError::InvalidArgument(
            "rates must lie in [0, 0.99]".into(),
        ));
    }
    let base = config.seed;

    let draw = |model: &GaussianModel, count: usize, label: &str| -> Vec<DVector<f64>> {
        model
            .sample_batch(count, seed::derive_seed(base, label))
            .into_iter()
            .map(|f| DVector::from_row_slice(f.embeddings.transpose().as_slice()))
            .collect()
    };
    let train: Vec<(DVector<f64>, usize)> = draw(m0, config.n_train, "classifier/train/0")
        .into_iter()
        .map(|v| (v, 0))
        .chain(
            draw(m1, config.n_train, "classifier/train/1")
                .into_iter()
                .map(|v| (v, 1)),
        )
        .collect();
    let test: Vec<(DVector<f64>, usize)> = draw(m0, config.n_test, "classifier/test/0")
        .into_iter()
        .map(|v| (v, 0))
        .chain(
            draw(m1, config.n_test, "classifier/test/1")
                .into_iter()
                .map(|v| (v, 1)),
        )
        .collect();

    let features = n * d + n;
    let mut rng = seed::rng_for(base, "classifier/train-masks");
    let mut x = DMatrix::zeros(train.len(), features);
    let mut labels = Vec::with_capacity(train.len());
    for (i, (values, label)) in train.iter().enumerate() {
        let rate = mask_rate_schedule(rng.random::<f64>(), config.max_rate)?;
        let k = keep_count(rate, n);
        let kept = if i % 2 == 0 {
            ranking.order[..k].to_vec()
        } else {
            random_subset(n, k, &mut rng)
        };
        x.row_mut(i)
            .copy_from(&masked_features(values, n, d, &kept).transpose());
        labels.push(*label);
    }
    let classifier = SoftmaxClassifier::fit(&x, &labels, 2, config);

    let score = |kept_for: &dyn Fn(usize) -> Vec<usize>| -> f64 {
        let correct = test
            .iter()
            .enumerate()
            .filter(|(i, (values, label))| {
                classifier.predict(&masked_features(values, n, d, &kept_for(*i))) == *label
            })
            .count();
        correct as f64 / test.len() as f64
    };

    let mut collapse_acc = Vec::with_capacity(rates.len());
    let mut random_acc = Vec::with_capacity(rates.len());
    for (r_idx, &rate) in rates.iter().enumerate() {
        let k = keep_count(rate, n);
        let top = ranking.order[..k].to_vec();
        collapse_acc.push(score(&|_| top.clone()));
        let mut rng = seed::rng_for(base, &format!("classifier/eval-masks/{r_idx}"));
        let subsets: Vec<Vec<usize>> = (0..test.len())
            .map(|_| random_subset(n, k, &mut rng))
            .collect();
        random_acc.push(score(&|i| subsets[i].clone()));
    }

    let degenerate = collapse_acc[0] < DEGENERATE_ACCURACY && random_acc[0] < DEGENERATE_ACCURACY;
    Ok(ClassifierEval {
        collapse: MaskRateCurve::new(rates.to_vec(), collapse_acc)?,
        random: MaskRateCurve::new(rates.to_vec(), random_acc)?,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collapse_rank::RankMethod;
    use crate::gaussian_field::StructureSpec;
    use approx::assert_relative_eq;

    #[test]
    fn entropy_endpoints() {
        let m = GaussianModel::build(&StructureSpec::chain(0.4), 5, 1).unwrap();
        let order = vec![2, 0, 4, 1, 3];
        let marginal: f64 = (0..5).map(|p| m.conditional_entropy(p, &[]).unwrap()).sum();
        assert_relative_eq!(
            cumulative_entropy(&m, &order, 0).unwrap(),
            marginal,
            epsilon = 1e-12
        );
        assert_eq!(cumulative_entropy(&m, &order, 5).unwrap(), 0.0);
        assert!(cumulative_entropy(&m, &order, 6).is_err());
        assert!(cumulative_entropy(&m, &[0, 0, 1, 2, 3], 2).is_err());
    }

    #[test]
    fn independent_prefix_entropy_is_linear() {
        let m = GaussianModel::build(&StructureSpec::independent(), 6, 1).unwrap();
        let h = 0.5 * crate::gaussian_field::LN_2PI_E;
        for order in [vec![0, 1, 2, 3, 4, 5], vec![5, 3, 1, 0, 2, 4]] {
            for k in 0..=6 {
                let v = cumulative_entropy(&m, &order, k).unwrap();
                assert_relative_eq!(v, (6 - k) as f64 * h, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn training_order_branches() {
        let ranking =
            CollapseRanking::from_scores(vec![0.1, 0.4, 0.3, 0.2], RankMethod::Direct, 1, 0.0);
        let mut saw_plain = false;
        for s in 0..50 {
            let t = sample_training_order(&ranking, 2, s).unwrap();
            check_permutation(&t.order, 4).unwrap();
            if !t.randomized {
                assert_eq!(t.order, vec![1, 2, 3, 0]);
                assert_eq!(t.masked(), &[3, 0]);
                saw_plain = true;
            }
        }
        assert!(saw_plain);
        assert!(sample_training_order(&ranking, 5, 0).is_err());
        let t = sample_training_order(&ranking, 0, 3).unwrap();
        assert!(t.masked().is_empty());
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(mask_rate_schedule(0.0, 0.99).unwrap(), 0.0);
        assert_relative_eq!(
            mask_rate_schedule(1.0, 0.99).unwrap(),
            0.99,
            epsilon = 1e-15
        );
        assert!(mask_rate_schedule(1.2, 0.5).is_err());
        assert!(mask_rate_schedule(0.5, 1.0).is_err());
    }

    #[test]
    fn keep_counts() {
        assert_eq!(keep_count(0.0, 32), 32);
        assert_eq!(keep_count(0.99, 32), 1);
        assert_eq!(keep_count(0.5, 32), 16);
        assert_eq!(keep_count(0.78, 16), 4);
    }

    #[test]
    fn auc_cases() {
        let rates = rate_grid(34, 0.99);
        assert_relative_eq!(
            auc_over_masks(&rates, &vec![0.8; 34]).unwrap(),
            0.8,
            epsilon = 1e-12
        );
        let linear: Vec<f64> = rates.iter().map(|r| 1.0 - r / 0.99).collect();
        assert_relative_eq!(
            auc_over_masks(&rates, &linear).unwrap(),
            0.5,
            epsilon = 1e-12
        );
        // hand trapezoid: (0.5·(1+0.6)·0.5 + 0.5·(0.6+0.2)·0.5) / 1 = 0.6
        assert_relative_eq!(
            auc_over_masks(&[0.0, 0.5, 1.0], &[1.0, 0.6, 0.2]).unwrap(),
            0.6,
            epsilon = 1e-12
        );
        assert!(auc_over_masks(&[0.0], &[1.0]).is_err());
        assert!(auc_over_masks(&[0.0, 0.0], &[1.0, 1.0]).is_err());
    }

    fn control_curve(rates: &[f64]) -> Vec<f64> {
        rates
            .iter()
            .map(|&r| {
                if r <= 0.78 + 1e-12 {
                    0.8
                } else {
                    0.8 - 0.7 * (r - 0.78) / 0.21
                }
            })
            .collect()
    }

    #[test]
    fn knee_on_flat_then_drop() {
        let rates = rate_grid(34, 0.99);
        let knee = find_knee(&rates, &control_curve(&rates)).unwrap();
        assert!(knee.found && knee.decreasing);
        assert_relative_eq!(knee.rate, 0.78, epsilon = 1e-9);
    }

    #[test]
    fn knee_on_linear_curve_is_flagged() {
        let rates = rate_grid(10, 0.9);
        let linear: Vec<f64> = rates.iter().map(|r| 1.0 - r).collect();
        let knee = find_knee(&rates, &linear).unwrap();
        assert!(!knee.found);
        assert_eq!(knee.rate, 0.0);
        assert!(find_knee(&[0.0, 0.5], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn knee_invariant_to_rate_scaling() {
        let rates = rate_grid(34, 0.99);
        let acc = control_curve(&rates);
        let scaled: Vec<f64> = rates.iter().map(|r| r * 7.5).collect();
        let a = find_knee(&rates, &acc).unwrap();
        let b = find_knee(&scaled, &acc).unwrap();
        assert_eq!(a.index, b.index);
        assert_relative_eq!(b.rate / 7.5, a.rate, epsilon = 1e-12);
    }
}
