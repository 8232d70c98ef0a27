//! Vision-based classifier banks built from exemplar embeddings.

use crate::aggregator::AggregatorModel;
use crate::error::{Error, Result};
use crate::fusion::{mean_baseline, ClassifierBank, Modality};
use crate::store::{BankRecord, EmbeddingBank};

/// Groups a class's records into exemplars. A record with augmentation index
/// 0 starts a new exemplar; the following non-zero records are its augmented
/// variants.
pub fn group_exemplars(records: &[BankRecord]) -> Vec<Vec<&[f32]>> {
    let mut out: Vec<Vec<&[f32]>> = Vec::new();
    for r in records {
        match out.last_mut() {
            Some(group) if r.augmentation != 0 => group.push(&r.embedding),
            _ => out.push(vec![&r.embedding]),
        }
    }
    out
}

/// All embeddings (every augmentation) of the first `k` exemplars.
pub fn first_exemplars(records: &[BankRecord], k: usize) -> Vec<&[f32]> {
    group_exemplars(records).into_iter().take(k).flatten().collect()
}

#[derive(Clone, Copy, Debug)]
pub enum VisualMethod<'a> {
    Aggregator(&'a AggregatorModel),
    Mean,
}

/// One classifier per non-empty class of `bank`, from its first `k`
/// exemplars. Classes without records are skipped and returned.
pub fn build_visual_bank(
    bank: &EmbeddingBank,
    method: VisualMethod<'_>,
    k: usize,
) -> Result<(ClassifierBank, Vec<String>)> {
    if k == 0 {
        return Err(Error::Parameter("k must be at least 1".into()));
    }
    if let VisualMethod::Aggregator(m) = method {
        if m.config().dim != bank.dimension() {
            return Err(Error::Config(format!(
                "bank dimension {} != model dimension {}",
                bank.dimension(),
                m.config().dim
            )));
        }
    }
    let mut out = ClassifierBank::new(bank.dimension())?;
    let mut skipped = Vec::new();
    for (class, records) in bank.iter() {
        let set = first_exemplars(records, k);
        if set.is_empty() {
            skipped.push(class.to_owned());
            continue;
        }
        let exemplars = group_exemplars(records).len().min(k);
        let note = format!("{exemplars} exemplars, {} embeddings", set.len());
        let (vector, modality) = match method {
            VisualMethod::Aggregator(m) => (m.aggregate(&set)?, Modality::VisionAgg),
            VisualMethod::Mean => (mean_baseline(&set)?, Modality::VisionMean),
        };
        out.insert(class, vector, modality, note)?;
    }
    Ok((out, skipped))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::SourceTag;

    fn rec(x: f32, aug: u16) -> BankRecord {
        BankRecord::new(vec![x, 1.0], SourceTag::In21k, aug)
    }

    #[test]
    fn augmentations_stay_with_their_exemplar() {
        let rs = [
            rec(1.0, 0),
            rec(2.0, 1),
            rec(3.0, 2),
            rec(4.0, 0),
            rec(5.0, 0),
            rec(6.0, 1),
        ];
        let g = group_exemplars(&rs);
        assert_eq!(g.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 1, 2]);
        assert_eq!(first_exemplars(&rs, 2).len(), 4);
        // a leading augmented record still forms its own exemplar
        assert_eq!(group_exemplars(&[rec(1.0, 3)]).len(), 1);
    }

    #[test]
    fn mean_bank_skips_empty_classes() {
        let mut b = EmbeddingBank::new(2).unwrap();
        b.push("a", rec(0.0, 0)).unwrap();
        b.insert_empty("z");
        let (cb, skipped) = build_visual_bank(&b, VisualMethod::Mean, 5).unwrap();
        assert_eq!(cb.get("a").unwrap().vector, vec![0.0, 1.0]);
        assert_eq!(skipped, vec!["z".to_string()]);
    }
}
