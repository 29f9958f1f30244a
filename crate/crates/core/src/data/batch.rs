use super::{LabeledExample, Vocabulary, PAD_ID};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Row-major token ids padded with `[PAD]` to the longest row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaddedTokens {
    pub width: usize,
    pub ids: Vec<u32>,
    pub lengths: Vec<usize>,
}

impl PaddedTokens {
    pub fn from_rows(rows: &[Vec<u32>]) -> Result<Self> {
        if let Some(i) = rows.iter().position(Vec::is_empty) {
            return Err(Error::Input(format!("row {i} has no tokens")));
        }
        let width = rows.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(rows.len() * width);
        for r in rows {
            ids.extend_from_slice(r);
            ids.extend(std::iter::repeat_n(PAD_ID, width - r.len()));
        }
        Ok(PaddedTokens {
            width,
            ids,
            lengths: rows.iter().map(Vec::len).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    /// The unpadded tokens of row `i`.
    pub fn row(&self, i: usize) -> &[u32] {
        &self.ids[i * self.width..i * self.width + self.lengths[i]]
    }

    pub fn rows(&self) -> Vec<&[u32]> {
        (0..self.len()).map(|i| self.row(i)).collect()
    }

    /// `true` where position `j` of row `i` holds a real token.
    pub fn mask(&self, i: usize, j: usize) -> bool {
        j < self.lengths[i]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub first: PaddedTokens,
    pub second: Option<PaddedTokens>,
    pub labels: Vec<Option<usize>>,
    /// Position of each row in the input example list.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.first.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batching {
    pub batches: Vec<Batch>,
    /// Examples dropped because a sentence tokenized to nothing.
    pub skipped: usize,
}

/// Tokenizes, maps through `vocab` and groups examples into padded batches.
/// The final short batch is kept. With `shuffle` the order is a seeded
/// permutation; otherwise input order is preserved.
pub fn make_batches(
    examples: &[LabeledExample],
    vocab: &Vocabulary,
    batch_size: usize,
    rng: &mut Rng,
    shuffle: bool,
) -> Result<Batching> {
    if batch_size == 0 {
        return Err(Error::Parameter("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    if shuffle {
        rng.shuffle(&mut order);
    }
    let mut skipped = 0;
    let mut encoded = Vec::with_capacity(order.len());
    for i in order {
        let ex = &examples[i];
        let a = vocab.encode_text(&ex.text_a);
        let b = ex.text_b.as_deref().map(|t| vocab.encode_text(t));
        if a.is_empty() || b.as_ref().is_some_and(Vec::is_empty) {
            skipped += 1;
            continue;
        }
        encoded.push((i, a, b, ex.label));
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} example(s) with an empty sentence");
    }
    let mut batches = Vec::new();
    for chunk in encoded.chunks(batch_size) {
        let firsts: Vec<Vec<u32>> = chunk.iter().map(|c| c.1.clone()).collect();
        let seconds: Option<Vec<Vec<u32>>> = chunk.iter().map(|c| c.2.clone()).collect();
        batches.push(Batch {
            first: PaddedTokens::from_rows(&firsts)?,
            second: seconds.map(|s| PaddedTokens::from_rows(&s)).transpose()?,
            labels: chunk.iter().map(|c| c.3).collect(),
            indices: chunk.iter().map(|c| c.0).collect(),
        });
    }
    Ok(Batching { batches, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::rng::Rng;

    fn vocab() -> Vocabulary {
        Vocabulary::from_tokens(["a", "b", "c", "d"]).unwrap()
    }

    #[test]
    fn batch_sizes_keep_final_short_batch() {
        let ex: Vec<_> = ["a", "b c", "d"].iter().map(|t| LabeledExample::single(*t, Some(0))).collect();
        let b = make_batches(&ex, &vocab(), 2, &mut Rng::new(1), false).unwrap();
        let sizes: Vec<usize> = b.batches.iter().map(Batch::len).collect();
        assert_eq!(sizes, vec![2, 1]);
    }

    #[test]
    fn padding_and_mask() {
        let ex = vec![LabeledExample::single("a b", None), LabeledExample::single("a b c", None)];
        let b = make_batches(&ex, &vocab(), 2, &mut Rng::new(1), false).unwrap();
        let first = &b.batches[0].first;
        assert_eq!(first.width, 3);
        assert!(first.mask(0, 1));
        assert!(!first.mask(0, 2));
        assert_eq!(first.ids[2], PAD_ID);
    }

    #[test]
    fn order_preserved_without_shuffle_and_empty_skipped() {
        let ex: Vec<_> = ["c", "", "a", "b"].iter().map(|t| LabeledExample::single(*t, None)).collect();
        let b = make_batches(&ex, &vocab(), 10, &mut Rng::new(1), false).unwrap();
        assert_eq!(b.skipped, 1);
        assert_eq!(b.batches[0].indices, vec![0, 2, 3]);
    }

    #[test]
    fn shuffle_is_seeded() {
        let ex: Vec<_> = (0..20).map(|i| LabeledExample::single(["a", "b", "c"][i % 3], Some(i))).collect();
        let x = make_batches(&ex, &vocab(), 4, &mut Rng::new(3), true).unwrap();
        let y = make_batches(&ex, &vocab(), 4, &mut Rng::new(3), true).unwrap();
        assert_eq!(x, y);
        let order: Vec<usize> = x.batches.iter().flat_map(|b| b.indices.clone()).collect();
        assert_ne!(order, (0..20).collect::<Vec<_>>());
    }

    proptest! {
        #[test]
        fn unpadding_restores_sequences(rows in proptest::collection::vec(proptest::collection::vec(1u32..50, 1..9), 1..12)) {
            let padded = PaddedTokens::from_rows(&rows).unwrap();
            for (i, r) in rows.iter().enumerate() {
                prop_assert_eq!(padded.row(i), r.as_slice());
                for j in r.len()..padded.width {
                    prop_assert_eq!(padded.ids[i * padded.width + j], PAD_ID);
                }
            }
        }
    }
}
