//! Contrastive pair mining and the ranking/pair losses used for fine-tuning.

use alloc::vec::Vec;

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::rng::{self, Rng};

/// One labeled example with its modality payloads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub example_id: u64,
    pub task_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<Vec<f64>>,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Positive,
    Negative,
}

/// Two examples, by index into the mined slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ContrastivePair {
    pub anchor: usize,
    pub other: usize,
    pub polarity: Polarity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairMiningConfig {
    /// Pairs sampled per polarity.
    #[serde(rename = "R")]
    pub r: usize,
    pub rng_seed: u64,
}

impl Default for PairMiningConfig {
    fn default() -> Self {
        PairMiningConfig { r: 20, rng_seed: 0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MinedPairs {
    pub positives: Vec<ContrastivePair>,
    pub negatives: Vec<ContrastivePair>,
}

/// Number of unordered pairs among `k` examples.
pub fn potential_pair_count(k: usize) -> usize {
    k * k.saturating_sub(1) / 2
}

/// Every unordered pair `(i, j)`, `i < j`, split by label agreement.
pub fn feasible_pairs(examples: &[LabeledExample]) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for i in 0..examples.len() {
        for j in i + 1..examples.len() {
            if examples[i].example_id == examples[j].example_id {
                continue;
            }
            if examples[i].label == examples[j].label {
                pos.push((i, j));
            } else {
                neg.push((i, j));
            }
        }
    }
    (pos, neg)
}

fn draw(pairs: &[(usize, usize)], r: usize, polarity: Polarity, rng: &mut Rng) -> Vec<ContrastivePair> {
    let amount = r.min(pairs.len());
    index::sample(rng, pairs.len(), amount)
        .into_iter()
        .map(|p| {
            let (a, b) = pairs[p];
            let (anchor, other) = if rng.random_bool(0.5) { (a, b) } else { (b, a) };
            ContrastivePair { anchor, other, polarity }
        })
        .collect()
}

/// Samples up to `R` positive and `R` negative pairs without replacement.
pub fn mine_pairs(examples: &[LabeledExample], cfg: &PairMiningConfig) -> Result<MinedPairs> {
    if cfg.r == 0 {
        return Err(Error::InvalidConfig("R must be at least 1".into()));
    }
    if examples.len() < 2 {
        return Err(Error::TooFewExamples { needed: 2, got: examples.len() });
    }
    let (pos, neg) = feasible_pairs(examples);
    if pos.is_empty() {
        return Err(Error::NoFeasiblePositivePairs);
    }
    if neg.is_empty() {
        return Err(Error::NoFeasibleNegativePairs);
    }
    let mut rng = rng::seeded(cfg.rng_seed);
    let positives = draw(&pos, cfg.r, Polarity::Positive, &mut rng);
    let negatives = draw(&neg, cfg.r, Polarity::Negative, &mut rng);
    Ok(MinedPairs { positives, negatives })
}

/// Splits positive pairs into groups whose anchors have pairwise distinct
/// labels, so in-batch negatives never share the anchor's class.
/// Groups with fewer than two pairs are dropped.
pub fn label_distinct_batches(
    pairs: &[ContrastivePair],
    examples: &[LabeledExample],
    rng: &mut Rng,
) -> Vec<Vec<ContrastivePair>> {
    let order = index::sample(rng, pairs.len(), pairs.len()).into_vec();
    let mut groups: Vec<Vec<ContrastivePair>> = Vec::new();
    for p in order {
        let pair = pairs[p];
        let label = examples[pair.anchor].label;
        match groups
            .iter_mut()
            .find(|g| g.iter().all(|q| examples[q.anchor].label != label))
        {
            Some(g) => g.push(pair),
            None => groups.push(alloc::vec![pair]),
        }
    }
    groups.retain(|g| g.len() >= 2);
    groups
}

/// Multiple-negatives ranking loss over `[n × d]` anchor/positive rows:
/// row `i`'s positive competes against every other row's positive under
/// cosine similarity scaled by `scale`.
pub fn mnr_loss<'t>(anchors: Var<'t>, positives: Var<'t>, scale: f64) -> Result<Var<'t>> {
    let shape = anchors.shape();
    if shape.len() != 2 || shape != positives.shape() {
        return Err(Error::ShapeMismatch {
            op: "mnr_loss",
            left: shape,
            right: positives.shape(),
        });
    }
    let n = shape[0];
    if n < 2 {
        return Err(Error::TooFewExamples { needed: 2, got: n });
    }
    let a = anchors.normalize_rows()?;
    let p = positives.normalize_rows()?;
    let scores = a.matmul(p.transpose()?)?.scale(scale)?;
    let labels: Vec<usize> = (0..n).collect();
    scores.softmax_cross_entropy(&labels)
}

/// [`mnr_loss`] on plain tensors.
pub fn mnr_loss_value(anchors: &Tensor, positives: &Tensor, scale: f64) -> Result<f64> {
    let tape = Tape::new();
    Ok(mnr_loss(tape.constant(anchors.clone()), tape.constant(positives.clone()), scale)?.item())
}

/// Mean of `1 − cos` over positive pairs and `max(0, cos − margin)` over
/// negative pairs.
pub fn explicit_pair_loss<'t>(
    left: Var<'t>,
    right: Var<'t>,
    polarities: &[Polarity],
    margin: f64,
) -> Result<Var<'t>> {
    let shape = left.shape();
    if shape.len() != 2 || shape != right.shape() || shape[0] != polarities.len() {
        return Err(Error::ShapeMismatch {
            op: "explicit_pair_loss",
            left: shape,
            right: right.shape(),
        });
    }
    if polarities.is_empty() {
        return Err(Error::TooFewExamples { needed: 1, got: 0 });
    }
    let tape = left.tape();
    let cos = left.normalize_rows()?.row_dot(right.normalize_rows()?)?;
    let mask = |want: Polarity| {
        let m = polarities.iter().map(|&p| if p == want { 1.0 } else { 0.0 }).collect();
        tape.constant(Tensor::vector(m))
    };
    let pos = cos.scale(-1.0)?.add_const(1.0)?.mul(mask(Polarity::Positive))?;
    let neg = cos.add_const(-margin)?.relu()?.mul(mask(Polarity::Negative))?;
    pos.add(neg)?.mean()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    pub(crate) fn examples(labels: &[usize]) -> Vec<LabeledExample> {
        labels
            .iter()
            .enumerate()
            .map(|(i, &label)| LabeledExample {
                example_id: i as u64,
                task_id: 0,
                text: Some(vec![i as u32]),
                image: None,
                label,
            })
            .collect()
    }

    #[test]
    fn pair_count_formula() {
        assert_eq!(potential_pair_count(8), 28);
        assert_eq!(potential_pair_count(2), 1);
        assert_eq!(potential_pair_count(1), 0);
        assert_eq!(potential_pair_count(0), 0);
    }

    #[test]
    fn small_pool_returns_everything_feasible() {
        let ex = examples(&[0, 0, 1, 1]);
        let mined = mine_pairs(&ex, &PairMiningConfig { r: 20, rng_seed: 1 }).unwrap();
        assert_eq!(mined.positives.len(), 2);
        assert_eq!(mined.negatives.len(), 4);
    }

    #[test]
    fn large_pool_is_capped_at_r() {
        let labels: Vec<usize> = (0..32).map(|i| i % 2).collect();
        let ex = examples(&labels);
        let mined = mine_pairs(&ex, &PairMiningConfig::default()).unwrap();
        assert_eq!(mined.positives.len(), 20);
        assert_eq!(mined.negatives.len(), 20);
        for p in &mined.positives {
            assert_eq!(ex[p.anchor].label, ex[p.other].label);
        }
        for p in &mined.negatives {
            assert_ne!(ex[p.anchor].label, ex[p.other].label);
        }
    }

    #[test]
    fn degenerate_pools_error() {
        let same = examples(&[3, 3, 3]);
        assert_eq!(mine_pairs(&same, &PairMiningConfig::default()), Err(Error::NoFeasibleNegativePairs));
        let distinct = examples(&[0, 1, 2]);
        assert_eq!(mine_pairs(&distinct, &PairMiningConfig::default()), Err(Error::NoFeasiblePositivePairs));
        assert!(mine_pairs(&examples(&[0]), &PairMiningConfig::default()).is_err());
    }

    #[test]
    fn seeds_control_the_draw() {
        let labels: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let ex = examples(&labels);
        let a = mine_pairs(&ex, &PairMiningConfig { r: 20, rng_seed: 5 }).unwrap();
        let b = mine_pairs(&ex, &PairMiningConfig { r: 20, rng_seed: 5 }).unwrap();
        let c = mine_pairs(&ex, &PairMiningConfig { r: 20, rng_seed: 6 }).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn grouping_keeps_labels_distinct() {
        let labels: Vec<usize> = (0..24).map(|i| i % 3).collect();
        let ex = examples(&labels);
        let mined = mine_pairs(&ex, &PairMiningConfig { r: 20, rng_seed: 2 }).unwrap();
        let mut r = rng::seeded(9);
        for g in label_distinct_batches(&mined.positives, &ex, &mut r) {
            assert!(g.len() >= 2 && g.len() <= 3);
            for (i, p) in g.iter().enumerate() {
                for q in &g[i + 1..] {
                    assert_ne!(ex[p.anchor].label, ex[q.anchor].label);
                }
            }
        }
    }

    #[test]
    fn identical_rows_give_log_n() {
        let rows = Tensor::new(&[8, 3], [0.2, -1.0, 0.5].repeat(8)).unwrap();
        let v = mnr_loss_value(&rows, &rows, 20.0).unwrap();
        assert!((v - libm::log(8.0)).abs() < 1e-12);
    }

    #[test]
    fn mnr_input_errors() {
        let one = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        assert!(mnr_loss_value(&one, &one, 20.0).is_err());
        let zero = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(mnr_loss_value(&zero, &zero, 20.0), Err(Error::ZeroNorm { .. })));
    }

    #[test]
    fn explicit_loss_cases() {
        let tape = Tape::new();
        let v = tape.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let pos = explicit_pair_loss(v, v, &[Polarity::Positive], 0.0).unwrap().item();
        assert!(pos.abs() < 1e-15);
        let neg = explicit_pair_loss(v, v, &[Polarity::Negative], 0.0).unwrap().item();
        assert!((neg - 1.0).abs() < 1e-15);
        assert!(explicit_pair_loss(v, v, &[], 0.0).is_err());
    }
}
