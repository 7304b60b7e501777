// SPDX-License-Identifier: MIT OR Apache-2.0

use super::{Lang, LanguagePair, ParallelExample, TaskKind, TRANSLATE};
use crate::error::Result;

fn next_id(data: &[ParallelExample]) -> u64 {
    data.iter().map(|r| r.id + 1).max().unwrap_or(0)
}

/// `+En`: appends the full language-A version of every record.
///
/// Language-A inputs come back duplicated (the degenerate case is
/// permitted).
pub fn augment_with_english(
    data: &[ParallelExample],
    pair: &LanguagePair,
) -> Result<Vec<ParallelExample>> {
    let base = next_id(data);
    let mut out = data.to_vec();
    for r in data {
        let x_en = r.x_en()?.to_vec();
        out.push(ParallelExample {
            id: base + r.id,
            lang: Lang::LangA,
            task: r.task,
            x: x_en.clone(),
            x_en: Some(x_en),
            y: pair.seq_to_a(&r.y),
        });
    }
    Ok(out)
}

/// `+MT`: appends a translation record per input, asking the model to
/// render the language-A question `x_en` in language B.
///
/// The constructed prompt is language A, so these records are tagged
/// `lang_a` and never take the fusion path.
pub fn augment_with_mt(
    data: &[ParallelExample],
    pair: &LanguagePair,
) -> Result<Vec<ParallelExample>> {
    let base = next_id(data);
    let mut out = data.to_vec();
    for r in data {
        let x_en = r.x_en()?;
        let mut x = Vec::with_capacity(x_en.len() + 1);
        x.push(TRANSLATE);
        x.extend_from_slice(x_en);
        out.push(ParallelExample {
            id: base + r.id,
            lang: Lang::LangA,
            task: TaskKind::Mt,
            x: x.clone(),
            x_en: Some(x),
            y: pair.seq_to_b(x_en),
        });
    }
    Ok(out)
}

/// Language-B renderings of every non-translation record, each paired
/// with its language-A prompt. Used to sample activation banks beyond the
/// language-B share of the training set.
pub fn bilingual_pairs(
    data: &[ParallelExample],
    pair: &LanguagePair,
) -> Result<Vec<ParallelExample>> {
    data.iter()
        .filter(|r| r.task != TaskKind::Mt)
        .map(|r| {
            let x_en = r.x_en()?.to_vec();
            Ok(ParallelExample {
                id: r.id,
                lang: Lang::LangB,
                task: r.task,
                x: pair.seq_to_b(&x_en),
                x_en: Some(x_en),
                y: pair.seq_to_b(&r.y),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_parallel_corpus, CorpusConfig};

    fn three() -> (Vec<ParallelExample>, LanguagePair) {
        let cfg = CorpusConfig {
            n_examples: 3,
            n_test: 1,
            weight_a: 0.0,
            weight_b: 1.0,
            ..CorpusConfig::default()
        };
        let c = generate_parallel_corpus(&cfg).unwrap();
        (c.train, c.languages)
    }

    #[test]
    fn english_doubles_and_maps_back() {
        let (d, pair) = three();
        let out = augment_with_english(&d, &pair).unwrap();
        assert_eq!(out.len(), 6);
        assert_eq!(&out[..3], d.as_slice());
        for (orig, en) in d.iter().zip(&out[3..]) {
            // inverse-map oracle: the English half maps back to the originals
            assert_eq!(pair.seq_to_b(&en.x), orig.x);
            assert_eq!(pair.seq_to_b(&en.y), orig.y);
            assert_eq!(en.lang, Lang::LangA);
        }
    }

    #[test]
    fn english_on_lang_a_duplicates() {
        let cfg = CorpusConfig {
            n_examples: 4,
            weight_b: 0.0,
            ..CorpusConfig::default()
        };
        let c = generate_parallel_corpus(&cfg).unwrap();
        let out = augment_with_english(&c.train, &c.languages).unwrap();
        for (a, b) in c.train.iter().zip(&out[4..]) {
            assert_eq!((&a.x, &a.y, a.task), (&b.x, &b.y, b.task));
        }
    }

    #[test]
    fn mt_records_translate_x_en() {
        let (d, pair) = three();
        let out = augment_with_mt(&d, &pair).unwrap();
        assert_eq!(out.len(), 6);
        for (orig, mt) in d.iter().zip(&out[3..]) {
            assert_eq!(mt.task, TaskKind::Mt);
            assert_eq!(mt.x[0], TRANSLATE);
            assert_eq!(mt.y, pair.seq_to_b(&mt.x[1..]));
            assert_eq!(mt.y, orig.x);
        }
    }

    #[test]
    fn missing_x_en_is_an_error() {
        let (mut d, pair) = three();
        d[1].x_en = None;
        assert!(augment_with_english(&d, &pair).is_err());
        assert!(augment_with_mt(&d, &pair).is_err());
    }
}
