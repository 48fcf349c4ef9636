//! Predictor selection by validation system SRCC and linear-combiner fusion
//! of the selected members' scores.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::training::{self, Dataset, Objective, TrainConfig, TrainingLog};

pub const DEFAULT_TOP_K: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel {
    pub member_ids: Vec<String>,
    pub combiner_weights: Vec<f32>,
    pub combiner_bias: f32,
}

impl FusionModel {
    pub fn uniform(member_ids: Vec<String>) -> Result<Self> {
        if member_ids.is_empty() {
            return Err(Error::Empty("member list"));
        }
        let k = member_ids.len();
        Ok(Self {
            combiner_weights: vec![1.0 / k as f32; k],
            combiner_bias: 0.0,
            member_ids,
        })
    }

    pub fn k(&self) -> usize {
        self.member_ids.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.member_ids.is_empty() {
            return Err(Error::Empty("member list"));
        }
        if self.combiner_weights.len() != self.k() {
            return Err(Error::DimensionMismatch {
                expected: self.k(),
                got: self.combiner_weights.len(),
            });
        }
        if self
            .combiner_weights
            .iter()
            .chain([&self.combiner_bias])
            .any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("combiner parameter"));
        }
        Ok(())
    }
}

fn by_rank(a: &(&str, &MetricReport), b: &(&str, &MetricReport)) -> Ordering {
    // NaN SRCC ranks last, NaN MSE ranks after any finite MSE
    let srcc = |r: &MetricReport| {
        let s = r.system.srcc;
        if s.is_nan() {
            f64::NEG_INFINITY
        } else {
            s
        }
    };
    let mse = |r: &MetricReport| {
        let m = r.system.mse;
        if m.is_nan() {
            f64::INFINITY
        } else {
            m
        }
    };
    srcc(b.1)
        .total_cmp(&srcc(a.1))
        .then(mse(a.1).total_cmp(&mse(b.1)))
        .then(a.0.cmp(b.0))
}

/// Top `k` ids by system SRCC (descending), then system MSE, then id.
pub fn rank_predictors<S: AsRef<str>>(
    reports: &[(S, MetricReport)],
    k: usize,
) -> Result<Vec<String>> {
    if k == 0 || k > reports.len() {
        return Err(Error::NotEnoughPredictors {
            requested: k,
            available: reports.len(),
        });
    }
    let mut order: Vec<(&str, &MetricReport)> =
        reports.iter().map(|(id, r)| (id.as_ref(), r)).collect();
    order.sort_by(by_rank);
    Ok(order
        .into_iter()
        .take(k)
        .map(|(id, _)| id.to_string())
        .collect())
}

pub fn fuse_forward(scores: &[f64], model: &FusionModel) -> Result<f64> {
    if scores.len() != model.k() {
        return Err(Error::DimensionMismatch {
            expected: model.k(),
            got: scores.len(),
        });
    }
    Ok(model
        .combiner_weights
        .iter()
        .zip(scores)
        .map(|(&w, s)| f64::from(w) * s)
        .sum::<f64>()
        + f64::from(model.combiner_bias))
}

struct Combiner;

impl Objective for Combiner {
    type Input = Vec<f64>;

    fn predict(&self, p: &[f64], x: &Vec<f64>) -> f64 {
        let k = x.len();
        x.iter().zip(&p[..k]).map(|(a, b)| a * b).sum::<f64>() + p[k]
    }

    fn accumulate_gradient(&self, _: &[f64], x: &Vec<f64>, s: f64, g: &mut [f64]) {
        let k = x.len();
        for (gi, xi) in g[..k].iter_mut().zip(x) {
            *gi += s * xi;
        }
        g[k] += s;
    }
}

/// Trains the combiner on frozen member scores, one row of `k` scores per
/// utterance in member order.
pub fn train_combiner(
    member_ids: Vec<String>,
    train: &Dataset<Vec<f64>>,
    val: &Dataset<Vec<f64>>,
    cfg: &TrainConfig,
) -> Result<(FusionModel, TrainingLog)> {
    let init = FusionModel::uniform(member_ids)?;
    let k = init.k();
    if let Some(bad) = train
        .inputs
        .iter()
        .chain(&val.inputs)
        .find(|x| x.len() != k)
    {
        return Err(Error::DimensionMismatch {
            expected: k,
            got: bad.len(),
        });
    }
    let mut p: Vec<f64> = init
        .combiner_weights
        .iter()
        .map(|&w| f64::from(w))
        .collect();
    p.push(0.0);
    let (best, log) = training::fit(&Combiner, p, train, val, cfg)?;
    Ok((
        FusionModel {
            combiner_weights: best[..k].iter().map(|&w| w as f32).collect(),
            combiner_bias: best[k] as f32,
            member_ids: init.member_ids,
        },
        log,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::MetricBlock;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn report(srcc: f64, mse: f64) -> MetricReport {
        let b = MetricBlock {
            mse,
            lcc: 0.0,
            srcc,
            ktau: 0.0,
        };
        MetricReport {
            utterance: b,
            system: b,
            n_utterances: 0,
            n_systems: 0,
        }
    }

    #[test]
    fn srcc_tie_broken_by_mse() {
        let reports = vec![
            ("C".to_string(), report(0.931, 0.1)),
            ("B".to_string(), report(0.939, 0.241)),
            ("A".to_string(), report(0.939, 0.036)),
        ];
        assert_eq!(rank_predictors(&reports, 2).unwrap(), vec!["A", "B"]);
        assert_eq!(rank_predictors(&reports, 3).unwrap(), vec!["A", "B", "C"]);
        assert_eq!(rank_predictors(&reports[..1], 1).unwrap(), vec!["C"]);
        assert!(matches!(
            rank_predictors(&reports, 4),
            Err(Error::NotEnoughPredictors { .. })
        ));
        assert!(rank_predictors(&reports, 0).is_err());
    }

    #[test]
    fn nan_srcc_ranks_last_and_ids_break_full_ties() {
        let reports = vec![
            ("z".to_string(), report(f64::NAN, 0.0)),
            ("b".to_string(), report(0.5, 0.2)),
            ("a".to_string(), report(0.5, 0.2)),
        ];
        assert_eq!(rank_predictors(&reports, 3).unwrap(), vec!["a", "b", "z"]);
    }

    #[test]
    fn forward_cases() {
        let m = FusionModel::uniform(vec!["a".into(), "b".into(), "c".into(), "d".into()]).unwrap();
        assert!((fuse_forward(&[1.0, 2.0, 3.0, 4.0], &m).unwrap() - 2.5).abs() < 1e-7);
        let one_hot = FusionModel {
            combiner_weights: vec![0.0, 1.0, 0.0, 0.0],
            ..m.clone()
        };
        assert_eq!(fuse_forward(&[1.0, 2.0, 3.0, 4.0], &one_hot).unwrap(), 2.0);
        assert!(matches!(
            fuse_forward(&[1.0], &m),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(FusionModel::uniform(vec![]), Err(Error::Empty(_))));
    }

    /// Members `label + N(0, σ_j)`, systems spread so system SRCC saturates.
    fn members(n: usize, sigmas: &[f64], seed: u64) -> Dataset<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let mut sys = Vec::new();
        for i in 0..n {
            let s = i % 8;
            let y = 1.2 + 0.45 * s as f64 + rng.random_range(-0.1..0.1);
            xs.push(
                sigmas
                    .iter()
                    .map(|&sd| y + Normal::new(0.0, sd).unwrap().sample(&mut rng))
                    .collect(),
            );
            ys.push(y);
            sys.push(format!("sys{s}"));
        }
        Dataset::new(xs, ys, sys).unwrap()
    }

    #[test]
    fn exact_member_dominates() {
        let mut train = members(200, &[0.4], 1);
        let mut val = members(100, &[0.4], 2);
        for d in [&mut train, &mut val] {
            for (x, y) in d.inputs.iter_mut().zip(&d.labels) {
                x.insert(0, *y);
            }
        }
        let (model, log) = train_combiner(
            vec!["exact".into(), "noisy".into()],
            &train,
            &val,
            &TrainConfig::default(),
        )
        .unwrap();
        assert!(log.best().val_l1 < 0.05, "{:?}", log.best());
        assert!(model.combiner_weights[0] > model.combiner_weights[1]);
    }

    #[test]
    fn single_unbiased_member_stays_near_identity() {
        let train = members(200, &[0.05], 3);
        let val = members(100, &[0.05], 4);
        let (model, _) =
            train_combiner(vec!["m".into()], &train, &val, &TrainConfig::default()).unwrap();
        assert!((model.combiner_weights[0] - 1.0).abs() < 0.05);
        assert!(model.combiner_bias.abs() < 0.1);
    }

    #[test]
    fn identical_members_do_no_worse_than_one() {
        let train = members(120, &[0.2], 5);
        let val = members(60, &[0.2], 6);
        let dup = |d: &Dataset<Vec<f64>>| d.map(|x| vec![x[0], x[0], x[0]]);
        let (_, single) =
            train_combiner(vec!["m".into()], &train, &val, &TrainConfig::default()).unwrap();
        let (_, triple) = train_combiner(
            vec!["a".into(), "b".into(), "c".into()],
            &dup(&train),
            &dup(&val),
            &TrainConfig::default(),
        )
        .unwrap();
        let member_l1 = crate::metrics::mean_abs_error(
            &val.inputs.iter().map(|x| x[0]).collect::<Vec<_>>(),
            &val.labels,
        )
        .unwrap();
        assert!(triple.best().val_l1 <= member_l1 + 1e-6);
        assert!(single.best().val_l1 <= member_l1 + 1e-6);
    }

    proptest! {
        #[test]
        fn forward_matches_dot_oracle(seed in any::<u64>(), k in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w: Vec<f32> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: f32 = rng.random_range(-1.0..1.0);
            let s: Vec<f64> = (0..k).map(|_| rng.random_range(1.0..5.0)).collect();
            let m = FusionModel { member_ids: (0..k).map(|i| i.to_string()).collect(), combiner_weights: w.clone(), combiner_bias: b };
            let mut oracle = b as f64;
            for i in 0..k {
                oracle += w[i] as f64 * s[i];
            }
            prop_assert!((fuse_forward(&s, &m).unwrap() - oracle).abs() < 1e-12);
        }

        #[test]
        fn monotone_with_nonnegative_weights(seed in any::<u64>(), j in 0usize..5, bump in 0.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = FusionModel {
                member_ids: (0..5).map(|i| i.to_string()).collect(),
                combiner_weights: (0..5).map(|_| rng.random_range(0.0..1.0)).collect(),
                combiner_bias: rng.random_range(-1.0..1.0),
            };
            let s: Vec<f64> = (0..5).map(|_| rng.random_range(1.0..5.0)).collect();
            let mut t = s.clone();
            t[j] += bump;
            prop_assert!(fuse_forward(&t, &m).unwrap() >= fuse_forward(&s, &m).unwrap());
        }

        #[test]
        fn ranking_is_a_total_order(seed in any::<u64>(), n in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let reports: Vec<(String, MetricReport)> = (0..n)
                .map(|i| (format!("p{i}"), report(rng.random_range(0..4) as f64 / 4.0, rng.random_range(0..3) as f64)))
                .collect();
            let ranked = rank_predictors(&reports, n).unwrap();
            let mut reversed = reports.clone();
            reversed.reverse();
            prop_assert_eq!(&ranked, &rank_predictors(&reversed, n).unwrap());
            for w in ranked.windows(2) {
                let a = &reports.iter().find(|r| r.0 == w[0]).unwrap().1;
                let b = &reports.iter().find(|r| r.0 == w[1]).unwrap().1;
                prop_assert!(a.system.srcc > b.system.srcc || (a.system.srcc == b.system.srcc && a.system.mse <= b.system.mse));
            }
        }
    }
}
