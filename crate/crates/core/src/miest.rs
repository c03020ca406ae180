//! Non-parametric entropy and mutual-information estimators and the
//! content/pose mutual information gap.
//!
//! Mutual information between a discrete label and a continuous vector uses
//! the nearest-neighbour estimator for mixed pairs with the max-coordinate
//! metric. Ties are handled adaptively: the per-sample neighbour count is the
//! number of same-label points within the k-th neighbour distance, so
//! duplicated vectors are counted rather than broken arbitrarily. All digamma
//! sums run over integer histograms in increasing order, which makes every
//! estimate bit-identical under any reordering of the samples.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::digamma;

use crate::error::{MipaeError, Result};
use crate::exec;

/// Default neighbour count.
pub const DEFAULT_K: usize = 3;

/// Side of the square grid used to discretise positions.
pub const POSITION_GRID: usize = 8;

/// Row-major matrix of `len` points in `dim` dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Points {
    dim: usize,
    data: Vec<f64>,
}

impl Points {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(MipaeError::Estimator(format!("{} values do not form rows of {dim}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(MipaeError::Estimator("non-finite coordinate".into()));
        }
        Ok(Self { dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(MipaeError::Estimator("ragged rows".into()));
        }
        Self::new(dim, rows.concat())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        let data = rows.iter().flat_map(|&i| self.row(i).iter().copied()).collect();
        Self { dim: self.dim, data }
    }
}

fn chebyshev(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn within(a: &[f64], b: &[f64], r: f64) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= r)
}

/// Points sorted along their widest coordinate, for exact pruned searches.
struct SortedPoints<'a> {
    points: &'a Points,
    members: Vec<usize>,
    axis: usize,
    keys: Vec<f64>,
}

impl<'a> SortedPoints<'a> {
    fn new(points: &'a Points, mut members: Vec<usize>) -> Self {
        let axis = (0..points.dim())
            .max_by(|&a, &b| {
                let spread = |d: usize| {
                    let (lo, hi) = members.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                        let v = points.row(i)[d];
                        (lo.min(v), hi.max(v))
                    });
                    hi - lo
                };
                spread(a).total_cmp(&spread(b)).then(b.cmp(&a))
            })
            .unwrap_or(0);
        members.sort_by(|&a, &b| points.row(a)[axis].total_cmp(&points.row(b)[axis]).then(a.cmp(&b)));
        let keys = members.iter().map(|&i| points.row(i)[axis]).collect();
        Self { points, members, axis, keys }
    }

    /// Distance from point `query` (a member) to its `k`-th nearest other member.
    fn kth_distance(&self, query: usize, k: usize) -> f64 {
        let q = self.points.row(query);
        let qk = q[self.axis];
        let start = self.keys.partition_point(|&v| v < qk);
        let mut best: Vec<f64> = Vec::with_capacity(k + 1);
        let bound = |best: &Vec<f64>| if best.len() == k { best[k - 1] } else { f64::INFINITY };
        let consider = |j: usize, best: &mut Vec<f64>| {
            let idx = self.members[j];
            if idx == query {
                return;
            }
            let d = chebyshev(q, self.points.row(idx));
            if d < bound(best) {
                let pos = best.partition_point(|&b| b <= d);
                best.insert(pos, d);
                best.truncate(k);
            }
        };
        let (mut lo, mut hi) = (start, start);
        loop {
            let r = bound(&best);
            let left_open = lo > 0 && qk - self.keys[lo - 1] <= r;
            let right_open = hi < self.keys.len() && self.keys[hi] - qk <= r;
            if !left_open && !right_open {
                break;
            }
            // advance whichever side is nearer along the sort axis
            let take_left = left_open && (!right_open || qk - self.keys[lo - 1] <= self.keys[hi] - qk);
            if take_left {
                lo -= 1;
                consider(lo, &mut best);
            } else {
                consider(hi, &mut best);
                hi += 1;
            }
        }
        bound(&best)
    }

    /// Members other than `query` within distance `r` (inclusive).
    fn count_within(&self, query: usize, r: f64) -> usize {
        let q = self.points.row(query);
        let qk = q[self.axis];
        let lo = self.keys.partition_point(|&v| v < qk - r);
        let hi = self.keys.partition_point(|&v| v <= qk + r);
        self.members[lo..hi].iter().filter(|&&j| j != query && within(q, self.points.row(j), r)).count()
    }
}

/// Mean of `digamma` over a histogram of positive integers, summed in increasing order.
fn mean_digamma(hist: &BTreeMap<usize, usize>, total: usize) -> f64 {
    hist.iter().map(|(&v, &c)| c as f64 * digamma(v as f64)).sum::<f64>() / total as f64
}

fn histogram(values: impl IntoIterator<Item = usize>) -> BTreeMap<usize, usize> {
    let mut h = BTreeMap::new();
    for v in values {
        *h.entry(v).or_insert(0) += 1;
    }
    h
}

/// Digamma-corrected plug-in entropy (nats) from class counts.
pub fn grassberger_entropy(counts: &[usize]) -> Result<f64> {
    if counts.is_empty() || counts.contains(&0) {
        return Err(MipaeError::Estimator("entropy needs positive class counts".into()));
    }
    let n: usize = counts.iter().sum();
    let weighted: f64 = histogram(counts.iter().copied()).iter().map(|(&v, &c)| (c * v) as f64 * digamma(v as f64)).sum();
    Ok(digamma(n as f64) - weighted / n as f64)
}

/// Entropy of a label sample.
pub fn label_entropy(labels: &[u32]) -> Result<f64> {
    grassberger_entropy(&class_counts(labels))
}

fn class_counts(labels: &[u32]) -> Vec<usize> {
    let mut m: BTreeMap<u32, usize> = BTreeMap::new();
    for &l in labels {
        *m.entry(l).or_insert(0) += 1;
    }
    m.into_values().collect()
}

/// Unclipped nearest-neighbour estimate of `I(label; vector)` in nats.
pub fn knn_mi_raw(labels: &[u32], points: &Points, k: usize) -> Result<f64> {
    let n = labels.len();
    if k == 0 {
        return Err(MipaeError::Estimator("k must be positive".into()));
    }
    if n != points.len() {
        return Err(MipaeError::Estimator(format!("{n} labels for {} points", points.len())));
    }
    let mut classes: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        classes.entry(l).or_default().push(i);
    }
    if let Some((label, members)) = classes.iter().find(|(_, m)| m.len() < k + 1) {
        return Err(MipaeError::Estimator(format!(
            "label {label} has {} samples, need at least {}",
            members.len(),
            k + 1
        )));
    }

    // Per sample: the k-th neighbour radius within its class and the number of
    // same-class points inside that radius.
    let mut radius = vec![0.0; n];
    let mut same = vec![0usize; n];
    for members in classes.values() {
        let index = SortedPoints::new(points, members.clone());
        let found = exec::map_indices(members.len(), |m| {
            let i = members[m];
            let r = index.kth_distance(i, k);
            (r, index.count_within(i, r))
        });
        for (&i, (r, c)) in members.iter().zip(found) {
            radius[i] = r;
            same[i] = c;
        }
    }
    let all = SortedPoints::new(points, (0..n).collect());
    let total = exec::map_indices(n, |i| all.count_within(i, radius[i]));

    let class_sizes = classes.values().map(Vec::len);
    Ok(digamma(n as f64) - mean_digamma(&histogram(class_sizes.flat_map(|s| std::iter::repeat(s).take(s))), n)
        + mean_digamma(&histogram(same), n)
        - mean_digamma(&histogram(total), n))
}

/// Nearest-neighbour estimate of `I(label; vector)` in nats, clipped at zero.
///
/// Every label class needs at least `k + 1` samples.
pub fn knn_mi_discrete_continuous(labels: &[u32], points: &Points, k: usize) -> Result<f64> {
    knn_mi_raw(labels, points, k).map(|v| v.max(0.0))
}

/// Discrete generative factors per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorSamples {
    /// Flattened content label, see [`content_label`].
    pub content: Vec<u32>,
    /// Position bin, see [`position_bin`].
    pub pose: Vec<u32>,
}

/// Learned codes per sample, index-aligned with [`FactorSamples`].
#[derive(Debug, Clone, PartialEq)]
pub struct RepSamples {
    pub content: Points,
    pub pose: Points,
}

/// `(shape, scale, orientation)` flattened as `(shape * scales + scale) * orientations + orientation`.
pub fn content_label(shape_id: usize, scale_id: usize, orient_id: usize) -> u32 {
    use crate::synthvid::{NUM_ORIENTATIONS, NUM_SCALES};
    ((shape_id * NUM_SCALES + scale_id) * NUM_ORIENTATIONS + orient_id) as u32
}

/// Cell of a `POSITION_GRID x POSITION_GRID` grid over the unit square, row-major in `y`.
pub fn position_bin(x: f64, y: f64) -> u32 {
    let cell = |v: f64| ((v * POSITION_GRID as f64).floor() as i64).clamp(0, POSITION_GRID as i64 - 1) as u32;
    cell(y) * POSITION_GRID as u32 + cell(x)
}

/// The four mutual-information terms, both factor entropies and the gap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MigReport {
    pub i_fc_zc: f64,
    pub i_fc_zp: f64,
    pub i_fp_zc: f64,
    pub i_fp_zp: f64,
    pub h_fc: f64,
    pub h_fp: f64,
    pub mig: f64,
}

/// Column names of the CSV form of a [`MigReport`].
pub const MIG_CSV_HEADER: [&str; 6] = ["experiment", "I(f_c,z_c)", "I(f_c,z_p)", "I(f_p,z_c)", "I(f_p,z_p)", "MIG"];

impl MigReport {
    pub fn from_terms(i_fc_zc: f64, i_fc_zp: f64, i_fp_zc: f64, i_fp_zp: f64, h_fc: f64, h_fp: f64) -> Result<Self> {
        if !(h_fc > 0.0 && h_fp > 0.0) {
            return Err(MipaeError::Estimator(format!("factor entropies must be positive (H(f_c)={h_fc}, H(f_p)={h_fp})")));
        }
        let mig = 0.5 / h_fc * (i_fc_zc - i_fc_zp) + 0.5 / h_fp * (i_fp_zp - i_fp_zc);
        Ok(Self { i_fc_zc, i_fc_zp, i_fp_zc, i_fp_zp, h_fc, h_fp, mig })
    }

    /// Writes labelled reports as CSV rows under [`MIG_CSV_HEADER`].
    pub fn write_csv<W: std::io::Write>(rows: &[(&str, MigReport)], out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(MIG_CSV_HEADER)?;
        for (name, r) in rows {
            let nums = [r.i_fc_zc, r.i_fc_zp, r.i_fp_zc, r.i_fp_zp, r.mig].map(|v| format!("{v:.4}"));
            w.write_record(std::iter::once(name.to_string()).chain(nums))?;
        }
        w.flush()
    }
}

/// Content/pose mutual information gap of learned codes against true factors.
pub fn mig_score(factors: &FactorSamples, reps: &RepSamples, k: usize) -> Result<MigReport> {
    let n = factors.content.len();
    if factors.pose.len() != n || reps.content.len() != n || reps.pose.len() != n {
        return Err(MipaeError::Estimator("factor and code samples are not aligned".into()));
    }
    let h_fc = label_entropy(&factors.content)?;
    let h_fp = label_entropy(&factors.pose)?;
    if h_fc <= 0.0 || h_fp <= 0.0 {
        return Err(MipaeError::Estimator("a generative factor has zero entropy".into()));
    }
    MigReport::from_terms(
        knn_mi_discrete_continuous(&factors.content, &reps.content, k)?,
        knn_mi_discrete_continuous(&factors.content, &reps.pose, k)?,
        knn_mi_discrete_continuous(&factors.pose, &reps.content, k)?,
        knn_mi_discrete_continuous(&factors.pose, &reps.pose, k)?,
        h_fc,
        h_fp,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn entropy_cases() {
        assert!(grassberger_entropy(&[1000]).unwrap().abs() < 1e-12);
        assert!((grassberger_entropy(&[500, 500]).unwrap() - 2f64.ln()).abs() < 0.01);
        assert!((grassberger_entropy(&[1000; 40]).unwrap() - 40f64.ln()).abs() < 0.01);
        assert!(grassberger_entropy(&[]).is_err());
        assert!(grassberger_entropy(&[3, 0]).is_err());
    }

    #[test]
    fn kth_distance_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f64> = (0..300 * 3).map(|_| rng.gen_range(-1.0..1.0f64)).map(|v| (v * 8.0).round() / 8.0).collect();
        let pts = Points::new(3, data).unwrap();
        let idx = SortedPoints::new(&pts, (0..pts.len()).collect());
        for q in (0..pts.len()).step_by(7) {
            let mut d: Vec<f64> = (0..pts.len()).filter(|&j| j != q).map(|j| chebyshev(pts.row(q), pts.row(j))).collect();
            d.sort_by(f64::total_cmp);
            for k in [1, 3, 5] {
                let r = idx.kth_distance(q, k);
                assert_eq!(r, d[k - 1]);
                assert_eq!(idx.count_within(q, r), d.iter().filter(|&&x| x <= r).count());
            }
        }
    }

    #[test]
    fn deterministic_codes_recover_label_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let labels: Vec<u32> = (0..3000).map(|_| rng.gen_range(0..5)).collect();
        let pts = Points::new(2, labels.iter().flat_map(|&l| [l as f64, -(l as f64)]).collect()).unwrap();
        let h = label_entropy(&labels).unwrap();
        let mi = knn_mi_discrete_continuous(&labels, &pts, 3).unwrap();
        assert!((mi - h).abs() < 0.05, "{mi} vs {h}");
    }

    #[test]
    fn independent_labels_give_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 5000;
        let data: Vec<f64> = (0..n * 2).map(|_| rng.sample(StandardNormal)).collect();
        let labels: Vec<u32> = (0..n).map(|_| rng.gen_range(0..4)).collect();
        let mi = knn_mi_discrete_continuous(&labels, &Points::new(2, data).unwrap(), 3).unwrap();
        assert!(mi <= 0.05, "{mi}");
    }

    #[test]
    fn small_classes_are_rejected() {
        let pts = Points::new(1, vec![0.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(knn_mi_discrete_continuous(&[0, 0, 0, 0, 1], &pts, 3).is_err());
        assert!(knn_mi_discrete_continuous(&[0, 0, 0, 0], &pts, 3).is_err());
        assert!(Points::new(2, vec![0.0, f64::NAN]).is_err());
    }

    #[test]
    fn estimates_are_permutation_invariant_bit_for_bit() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 2000;
        let rows: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.sample(StandardNormal), rng.sample(StandardNormal)]).collect();
        let labels: Vec<u32> = rows.iter().map(|r| (r[0] > 0.3) as u32 + 2 * (r[1] > -0.5) as u32).collect();
        let base = knn_mi_raw(&labels, &Points::from_rows(&rows).unwrap(), 3).unwrap();
        let mut order: Vec<usize> = (0..n).collect();
        for _ in 0..3 {
            order.shuffle(&mut rng);
            let l: Vec<u32> = order.iter().map(|&i| labels[i]).collect();
            let r: Vec<Vec<f64>> = order.iter().map(|&i| rows[i].clone()).collect();
            assert_eq!(knn_mi_raw(&l, &Points::from_rows(&r).unwrap(), 3).unwrap().to_bits(), base.to_bits());
        }
    }

    #[test]
    fn labels_and_bins() {
        assert_eq!(content_label(0, 0, 0), 0);
        assert_eq!(content_label(2, 5, 39), 719);
        assert_eq!(position_bin(0.0, 0.0), 0);
        assert_eq!(position_bin(0.99, 0.0), 7);
        assert_eq!(position_bin(0.0, 0.99), 56);
        assert_eq!(position_bin(1.0, 1.0), 63);
        assert_eq!(position_bin(0.126, 0.124), 1);
    }

    #[test]
    fn mig_report_csv_has_table_columns() {
        let r = MigReport::from_terms(1.0, 0.1, 0.2, 2.0, 2.0, 4.0).unwrap();
        assert!((r.mig - (0.25 * 0.9 + 0.125 * 1.8)).abs() < 1e-12);
        let mut buf = Vec::new();
        MigReport::write_csv(&[("mipae", r)], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "experiment,\"I(f_c,z_c)\",\"I(f_c,z_p)\",\"I(f_p,z_c)\",\"I(f_p,z_p)\",MIG\nmipae,1.0000,0.1000,0.2000,2.0000,0.4500\n");
        assert!(MigReport::from_terms(1.0, 0.0, 0.0, 1.0, 0.0, 1.0).is_err());
    }
}
