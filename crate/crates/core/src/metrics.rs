//! MSE, Pearson (LCC), Spearman (SRCC) and Kendall tau-b (KTAU) at utterance
//! and system level.
//!
//! Correlations of a constant input (or, for tau-b, one where every pair is
//! tied) are `f64::NAN`.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};

fn check_pair(pred: &[f64], label: &[f64], min_len: usize) -> Result<()> {
    if pred.len() != label.len() {
        return Err(Error::DimensionMismatch {
            expected: label.len(),
            got: pred.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::Empty("prediction vector"));
    }
    if pred.len() < min_len {
        return Err(Error::TooFewSamples {
            needed: min_len,
            got: pred.len(),
        });
    }
    if pred.iter().chain(label).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("metric input"));
    }
    Ok(())
}

pub fn mse(pred: &[f64], label: &[f64]) -> Result<f64> {
    check_pair(pred, label, 1)?;
    let sum: f64 = pred.iter().zip(label).map(|(p, l)| (p - l) * (p - l)).sum();
    Ok(sum / pred.len() as f64)
}

pub fn mean_abs_error(pred: &[f64], label: &[f64]) -> Result<f64> {
    check_pair(pred, label, 1)?;
    let sum: f64 = pred.iter().zip(label).map(|(p, l)| (p - l).abs()).sum();
    Ok(sum / pred.len() as f64)
}

fn is_constant(v: &[f64]) -> bool {
    v.iter().all(|&a| a == v[0])
}

fn pearson_unchecked(x: &[f64], y: &[f64]) -> f64 {
    // the mean of identical values can be off by an ulp
    if is_constant(x) || is_constant(y) {
        return f64::NAN;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return f64::NAN;
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

/// Pearson linear correlation coefficient.
pub fn lcc(pred: &[f64], label: &[f64]) -> Result<f64> {
    check_pair(pred, label, 2)?;
    Ok(pearson_unchecked(pred, label))
}

/// 1-based fractional ranks; tied values share the average of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        // positions i+1 ..= j share rank (i+1+j)/2
        let rank = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = rank;
        }
        i = j;
    }
    ranks
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn srcc(pred: &[f64], label: &[f64]) -> Result<f64> {
    check_pair(pred, label, 2)?;
    Ok(pearson_unchecked(
        &average_ranks(pred),
        &average_ranks(label),
    ))
}

/// Kendall tau-b via Knight's O(n log n) algorithm.
pub fn ktau(pred: &[f64], label: &[f64]) -> Result<f64> {
    check_pair(pred, label, 2)?;
    let n = pred.len();
    let mut pairs: Vec<(f64, f64)> = pred.iter().copied().zip(label.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let total = (n * (n - 1) / 2) as i64;
    let (mut tied_x, mut tied_xy) = (0i64, 0i64);
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && pairs[j].0 == pairs[i].0 {
            j += 1;
        }
        tied_x += choose2(j - i);
        let mut k = i;
        while k < j {
            let mut m = k + 1;
            while m < j && pairs[m].1 == pairs[k].1 {
                m += 1;
            }
            tied_xy += choose2(m - k);
            k = m;
        }
        i = j;
    }

    let mut ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let mut scratch = vec![0.0; n];
    let swaps = merge_count(&mut ys, &mut scratch);

    let mut tied_y = 0i64;
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && ys[j] == ys[i] {
            j += 1;
        }
        tied_y += choose2(j - i);
        i = j;
    }

    let denom_x = total - tied_x;
    let denom_y = total - tied_y;
    if denom_x == 0 || denom_y == 0 {
        return Ok(f64::NAN);
    }
    let numer = total - tied_x - tied_y + tied_xy - 2 * swaps;
    Ok(numer as f64 / ((denom_x as f64) * (denom_y as f64)).sqrt())
}

fn choose2(t: usize) -> i64 {
    (t * t.saturating_sub(1) / 2) as i64
}

/// Stable merge sort returning the number of strict inversions.
fn merge_count(v: &mut [f64], scratch: &mut [f64]) -> i64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut count = {
        let (left, right) = v.split_at_mut(mid);
        let (sl, sr) = scratch.split_at_mut(mid);
        merge_count(left, sl) + merge_count(right, sr)
    };
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j] < v[i] {
            scratch[k] = v[j];
            count += (mid - i) as i64;
            j += 1;
        } else {
            scratch[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    scratch[k..k + mid - i].copy_from_slice(&v[i..mid]);
    k += mid - i;
    scratch[k..k + n - j].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&scratch[..n]);
    count
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemScore {
    pub system_id: String,
    pub mean_pred: f64,
    pub mean_label: f64,
    pub count: usize,
}

/// Per-system means of predictions and labels, ordered by system id.
pub fn system_aggregate<S: AsRef<str>>(
    pred: &[f64],
    label: &[f64],
    system_ids: &[S],
) -> Result<Vec<SystemScore>> {
    check_pair(pred, label, 1)?;
    if system_ids.len() != pred.len() {
        return Err(Error::DimensionMismatch {
            expected: pred.len(),
            got: system_ids.len(),
        });
    }
    let mut groups: BTreeMap<&str, (f64, f64, usize)> = BTreeMap::new();
    for ((p, l), s) in pred.iter().zip(label).zip(system_ids) {
        let g = groups.entry(s.as_ref()).or_insert((0.0, 0.0, 0));
        g.0 += p;
        g.1 += l;
        g.2 += 1;
    }
    Ok(groups
        .into_iter()
        .map(|(id, (sp, sl, n))| SystemScore {
            system_id: id.to_string(),
            mean_pred: sp / n as f64,
            mean_label: sl / n as f64,
            count: n,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricBlock {
    pub mse: f64,
    pub lcc: f64,
    pub srcc: f64,
    pub ktau: f64,
}

impl MetricBlock {
    fn compute(pred: &[f64], label: &[f64]) -> Result<Self> {
        let mse = mse(pred, label)?;
        if pred.len() < 2 {
            return Ok(Self {
                mse,
                lcc: f64::NAN,
                srcc: f64::NAN,
                ktau: f64::NAN,
            });
        }
        Ok(Self {
            mse,
            lcc: lcc(pred, label)?,
            srcc: srcc(pred, label)?,
            ktau: ktau(pred, label)?,
        })
    }

    fn values(&self) -> [f64; 4] {
        [self.mse, self.lcc, self.srcc, self.ktau]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub utterance: MetricBlock,
    pub system: MetricBlock,
    pub n_utterances: usize,
    pub n_systems: usize,
}

pub const REPORT_CSV_HEADER: &str =
    "utt_mse,utt_lcc,utt_srcc,utt_ktau,sys_mse,sys_lcc,sys_srcc,sys_ktau";

impl MetricReport {
    pub fn values(&self) -> [f64; 8] {
        let mut out = [0.0; 8];
        out[..4].copy_from_slice(&self.utterance.values());
        out[4..].copy_from_slice(&self.system.values());
        out
    }

    /// Header plus one row, shortest round-trip formatting.
    pub fn to_csv(&self) -> String {
        let row: Vec<String> = self.values().iter().map(|v| format_value(*v)).collect();
        format!("{REPORT_CSV_HEADER}\n{}\n", row.join(","))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let bad = |m: &str| Error::Csv {
            path: "<report>".into(),
            message: m.to_string(),
        };
        if lines.next() != Some(REPORT_CSV_HEADER) {
            return Err(bad("unexpected report header"));
        }
        let row = lines.next().ok_or_else(|| bad("missing report row"))?;
        let vals: Vec<f64> = row
            .split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|_| bad("unparsable value")))
            .collect::<Result<_>>()?;
        if vals.len() != 8 {
            return Err(bad("expected 8 values"));
        }
        let block = |v: &[f64]| MetricBlock {
            mse: v[0],
            lcc: v[1],
            srcc: v[2],
            ktau: v[3],
        };
        Ok(Self {
            utterance: block(&vals[..4]),
            system: block(&vals[4..]),
            n_utterances: 0,
            n_systems: 0,
        })
    }
}

pub fn format_value(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        format!("{v}")
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cell = |v: f64| {
            if v.is_nan() {
                "nan".to_string()
            } else {
                format!("{v:.3}")
            }
        };
        writeln!(
            f,
            "{:<12} {:>8} {:>8} {:>8} {:>8}",
            "level", "MSE", "LCC", "SRCC", "KTAU"
        )?;
        for (name, b, n) in [
            ("utterance", &self.utterance, self.n_utterances),
            ("system", &self.system, self.n_systems),
        ] {
            writeln!(
                f,
                "{:<12} {:>8} {:>8} {:>8} {:>8}   (n = {n})",
                name,
                cell(b.mse),
                cell(b.lcc),
                cell(b.srcc),
                cell(b.ktau)
            )?;
        }
        Ok(())
    }
}

/// Utterance metrics over raw pairs, system metrics over per-system means.
pub fn full_report<S: AsRef<str>>(
    pred: &[f64],
    label: &[f64],
    system_ids: &[S],
) -> Result<MetricReport> {
    let systems = system_aggregate(pred, label, system_ids)?;
    let sys_pred: Vec<f64> = systems.iter().map(|s| s.mean_pred).collect();
    let sys_label: Vec<f64> = systems.iter().map(|s| s.mean_label).collect();
    Ok(MetricReport {
        utterance: MetricBlock::compute(pred, label)?,
        system: MetricBlock::compute(&sys_pred, &sys_label)?,
        n_utterances: pred.len(),
        n_systems: systems.len(),
    })
}

/// System-level SRCC, the ranking and checkpoint criterion.
pub fn system_srcc<S: AsRef<str>>(pred: &[f64], label: &[f64], system_ids: &[S]) -> Result<f64> {
    let systems = system_aggregate(pred, label, system_ids)?;
    if systems.len() < 2 {
        return Err(Error::SingleSystem(systems.len()));
    }
    let p: Vec<f64> = systems.iter().map(|s| s.mean_pred).collect();
    let l: Vec<f64> = systems.iter().map(|s| s.mean_label).collect();
    srcc(&p, &l)
}


#[cfg(test)]
mod tests {
    use super::oracle;
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut ChaCha8Rng, n: usize, ties: bool) -> Vec<f64> {
        (0..n)
            .map(|_| {
                if ties {
                    rng.random_range(0..8) as f64 * 0.5
                } else {
                    rng.random_range(-3.0..3.0)
                }
            })
            .collect()
    }

    #[test]
    fn mse_cases() {
        let l = [1.0, 2.5, 4.0];
        assert_eq!(mse(&l, &l).unwrap(), 0.0);
        let p: Vec<f64> = l.iter().map(|v| v + 0.5).collect();
        assert_eq!(mse(&p, &l).unwrap(), 0.25);
        assert!(mse(&[1.0], &[1.0, 2.0]).is_err());
        assert!(mse(&[], &[]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_vec(&mut rng, 50, false);
        let b = random_vec(&mut rng, 50, false);
        let mut oracle = 0.0;
        for i in 0..50 {
            oracle += (a[i] - b[i]).powi(2) / 50.0;
        }
        let got = mse(&a, &b).unwrap();
        assert!(((got - oracle) / oracle).abs() < 1e-9);
    }

    #[test]
    fn lcc_cases() {
        let l = [1.0, 2.0, 4.0, 3.5, 2.2];
        let p: Vec<f64> = l.iter().map(|v| 2.0 * v + 1.0).collect();
        assert!((lcc(&p, &l).unwrap() - 1.0).abs() < 1e-12);
        let n: Vec<f64> = l.iter().map(|v| -v).collect();
        assert!((lcc(&n, &l).unwrap() + 1.0).abs() < 1e-12);
        // direct covariance computation for fixed 5-pair vectors
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y = [2.0, 1.0, 4.0, 3.0, 5.0];
        // means 3, 3; cov sum = 8; var sums = 10, 10 -> 0.8
        assert!((lcc(&x, &y).unwrap() - 0.8).abs() < 1e-12);
        assert!(lcc(&[2.0, 2.0, 2.0], &x[..3]).unwrap().is_nan());
        assert!(lcc(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn srcc_cases() {
        let l = [1.2, 3.4, 2.2, 4.9, 1.0];
        let p: Vec<f64> = l.iter().map(|v: &f64| v.exp()).collect();
        assert_eq!(srcc(&p, &l).unwrap(), 1.0);
        let r: Vec<f64> = l.iter().map(|v| -v).collect();
        assert_eq!(srcc(&r, &l).unwrap(), -1.0);
        // ties: pred ranks (1, 2.5, 2.5, 4), label ranks (1, 3, 2, 4)
        let got = srcc(&[1.0, 2.0, 2.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        let want = oracle::spearman(&[1.0, 2.0, 2.0, 4.0], &[1.0, 3.0, 2.0, 4.0]);
        // cov = 4.5, var_p = 4.5, var_l = 5 -> 4.5/sqrt(22.5)
        assert!((want - 4.5 / 22.5f64.sqrt()).abs() < 1e-15);
        assert!((got - want).abs() < 1e-12);
        assert!(srcc(&[1.0, 1.0], &[1.0, 2.0]).unwrap().is_nan());
    }

    #[test]
    fn ktau_cases() {
        assert_eq!(
            ktau(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 4.0]).unwrap(),
            1.0
        );
        // one adjacent swap among 4: 5 concordant, 1 discordant
        let got = ktau(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((got - 2.0 / 3.0).abs() < 1e-15);
        assert!(
            (oracle::kendall_tau_b(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]) - 2.0 / 3.0).abs()
                < 1e-15
        );
        assert!(ktau(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap().is_nan());

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let a = random_vec(&mut rng, 40, true);
            let b = random_vec(&mut rng, 40, true);
            let (got, want) = (ktau(&a, &b).unwrap(), oracle::kendall_tau_b(&a, &b));
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn aggregation() {
        let one = system_aggregate(&[1.0, 2.0, 3.0], &[2.0, 2.0, 5.0], &["s", "s", "s"]).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!((one[0].mean_pred, one[0].mean_label), (2.0, 3.0));

        let two = system_aggregate(
            &[4.0, 1.0, 4.0, 1.0],
            &[4.5, 1.5, 4.5, 1.5],
            &["b", "a", "b", "a"],
        )
        .unwrap();
        assert_eq!(two[0].system_id, "a");
        assert_eq!((two[0].mean_pred, two[1].mean_pred), (1.0, 4.0));
        assert_eq!((two[0].mean_label, two[1].mean_label), (1.5, 4.5));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_vec(&mut rng, 60, false);
        let l = random_vec(&mut rng, 60, false);
        let ids: Vec<String> = (0..60)
            .map(|_| format!("s{}", rng.random_range(0..7)))
            .collect();
        let agg = system_aggregate(&p, &l, &ids).unwrap();
        for s in &agg {
            let members: Vec<usize> = (0..60).filter(|&i| ids[i] == s.system_id).collect();
            let mp = members.iter().map(|&i| p[i]).sum::<f64>() / members.len() as f64;
            let ml = members.iter().map(|&i| l[i]).sum::<f64>() / members.len() as f64;
            assert!((mp - s.mean_pred).abs() < 1e-12 && (ml - s.mean_label).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_report() {
        let l = [1.0, 2.0, 3.0, 4.0, 4.5, 2.5];
        let ids = ["a", "a", "b", "b", "c", "c"];
        let r = full_report(&l, &l, &ids).unwrap();
        assert_eq!(r.utterance.mse, 0.0);
        assert_eq!(r.system.mse, 0.0);
        for v in [
            r.utterance.lcc,
            r.utterance.srcc,
            r.utterance.ktau,
            r.system.lcc,
            r.system.srcc,
            r.system.ktau,
        ] {
            assert!((v - 1.0).abs() < 1e-12);
        }
        assert_eq!((r.n_utterances, r.n_systems), (6, 3));
    }

    #[test]
    fn scrambled_within_system() {
        let labels = [1.0, 2.0, 3.0, 3.5, 4.0, 5.0];
        let ids = ["a", "a", "b", "b", "c", "c"];
        let good = full_report(&labels, &labels, &ids).unwrap();
        let scrambled = [2.0, 1.0, 3.5, 3.0, 5.0, 4.0];
        let r = full_report(&scrambled, &labels, &ids).unwrap();
        assert_eq!(r.system, good.system);
        assert!(r.utterance.srcc < good.utterance.srcc);
    }

    #[test]
    fn csv_round_trip() {
        let l = [1.0, 2.0, 3.3, 4.0];
        let p = [1.1, 2.2, 3.0, 4.4];
        let r = full_report(&p, &l, &["a", "b", "a", "b"]).unwrap();
        let back = MetricReport::from_csv(&r.to_csv()).unwrap();
        assert_eq!(
            back.values().map(f64::to_bits),
            r.values().map(f64::to_bits)
        );
        assert!(r.to_string().contains("SRCC"));
    }

    proptest! {
        #[test]
        fn fast_paths_match_quadratic_oracles(seed in any::<u64>(), n in 2usize..120, ties in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_vec(&mut rng, n, ties);
            let b = random_vec(&mut rng, n, ties);
            let pairs = [(srcc(&a, &b).unwrap(), oracle::spearman(&a, &b)), (ktau(&a, &b).unwrap(), oracle::kendall_tau_b(&a, &b))];
            for (got, want) in pairs {
                prop_assert!((got.is_nan() && want.is_nan()) || (got - want).abs() < 1e-12);
            }
        }

        #[test]
        fn rank_metrics_invariant_under_increasing_maps(seed in any::<u64>(), n in 3usize..60) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_vec(&mut rng, n, false);
            let b = random_vec(&mut rng, n, true);
            let ta: Vec<f64> = a.iter().map(|v| v.powi(3) + 2.0 * v).collect();
            let s0 = srcc(&a, &b).unwrap();
            let k0 = ktau(&a, &b).unwrap();
            prop_assert!((s0.is_nan() && srcc(&ta, &b).unwrap().is_nan()) || (srcc(&ta, &b).unwrap() - s0).abs() < 1e-12);
            prop_assert!((k0.is_nan() && ktau(&ta, &b).unwrap().is_nan()) || (ktau(&ta, &b).unwrap() - k0).abs() < 1e-12);
        }

        #[test]
        fn symmetric_in_arguments(seed in any::<u64>(), n in 2usize..60) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_vec(&mut rng, n, true);
            let b = random_vec(&mut rng, n, false);
            let same = |x: f64, y: f64| (x.is_nan() && y.is_nan()) || (x - y).abs() < 1e-12;
            prop_assert!(same(mse(&a, &b).unwrap(), mse(&b, &a).unwrap()));
            prop_assert!(same(lcc(&a, &b).unwrap(), lcc(&b, &a).unwrap()));
            prop_assert!(same(srcc(&a, &b).unwrap(), srcc(&b, &a).unwrap()));
            prop_assert!(same(ktau(&a, &b).unwrap(), ktau(&b, &a).unwrap()));
        }
    }
}
