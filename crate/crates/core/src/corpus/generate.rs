// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    augment_with_english, augment_with_mt, write_jsonl, Lang, LanguagePair, ParallelExample,
    TaskKind,
};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMix {
    pub copy: f64,
    pub reverse: f64,
    pub lookup: f64,
}

impl TaskMix {
    pub fn only(task: TaskKind) -> Self {
        let mut m = Self {
            copy: 0.0,
            reverse: 0.0,
            lookup: 0.0,
        };
        match task {
            TaskKind::Copy => m.copy = 1.0,
            TaskKind::Reverse => m.reverse = 1.0,
            TaskKind::Lookup | TaskKind::Mt => m.lookup = 1.0,
        }
        m
    }

    fn entries(&self) -> [(TaskKind, f64); 3] {
        [
            (TaskKind::Copy, self.copy),
            (TaskKind::Reverse, self.reverse),
            (TaskKind::Lookup, self.lookup),
        ]
    }
}

impl Default for TaskMix {
    fn default() -> Self {
        Self {
            copy: 0.25,
            reverse: 0.25,
            lookup: 0.5,
        }
    }
}

/// Knobs of the synthetic corpus. `seed` fixes everything: the bijection,
/// the lookup table, and the train/test samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_examples: usize,
    pub n_test: usize,
    /// Content tokens per language.
    pub content_size: usize,
    pub weight_a: f64,
    pub weight_b: f64,
    pub task_mix: TaskMix,
    pub min_len: usize,
    pub max_len: usize,
    pub lookup_keys: usize,
    pub lookup_key_len: usize,
    pub lookup_answer_len: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_examples: 4000,
            n_test: 400,
            content_size: 48,
            weight_a: 9.0,
            weight_b: 1.0,
            task_mix: TaskMix::default(),
            min_len: 2,
            max_len: 5,
            lookup_keys: 160,
            lookup_key_len: 2,
            lookup_answer_len: 2,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_examples == 0 {
            return Err(Error::config("n_examples must be positive"));
        }
        let mix: f64 = self.task_mix.entries().iter().map(|e| e.1).sum();
        if self.task_mix.entries().iter().any(|e| e.1 < 0.0) || (mix - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "task mix must be nonnegative and sum to 1, got {mix}"
            )));
        }
        if self.weight_a < 0.0 || self.weight_b < 0.0 || self.weight_a + self.weight_b <= 0.0 {
            return Err(Error::config(
                "resource weights must be nonnegative with a positive sum",
            ));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::config("need 0 < min_len <= max_len"));
        }
        if self.lookup_key_len == 0 || self.lookup_answer_len == 0 || self.lookup_keys == 0 {
            return Err(Error::config("lookup shapes must be positive"));
        }
        let distinct = (self.content_size as f64).powi(self.lookup_key_len as i32);
        if (self.lookup_keys as f64) > distinct {
            return Err(Error::config(
                "more lookup keys than distinct key sequences",
            ));
        }
        Ok(())
    }
}

/// Language-invariant lookup facts, stored as content indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LookupTable {
    pub keys: Vec<Vec<usize>>,
    pub answers: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub records: usize,
    pub by_lang: BTreeMap<String, usize>,
    pub by_task: BTreeMap<String, usize>,
}

/// Description of a generated corpus directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub files: Vec<FileEntry>,
    /// Record counts per augmentation kind (`none`, `en`, `mt`) of the
    /// training split.
    pub by_augmentation: BTreeMap<String, usize>,
    pub config: CorpusConfig,
    pub languages: LanguagePair,
    pub lookup: LookupTable,
}

#[derive(Clone, Debug)]
pub struct GeneratedCorpus {
    pub train: Vec<ParallelExample>,
    pub test: Vec<ParallelExample>,
    pub languages: LanguagePair,
    pub lookup: LookupTable,
    pub config: CorpusConfig,
}

fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    // largest remainder; ties go to the earlier entry
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut rest = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&i, &j| {
        let (fi, fj) = (exact[i] - exact[i].floor(), exact[j] - exact[j].floor());
        fj.partial_cmp(&fi).unwrap().then(i.cmp(&j))
    });
    for i in order {
        if rest == 0 {
            break;
        }
        counts[i] += 1;
        rest -= 1;
    }
    counts
}

fn build_lookup(cfg: &CorpusConfig, rng: &mut ChaCha8Rng) -> LookupTable {
    let mut keys = Vec::with_capacity(cfg.lookup_keys);
    let mut seen = std::collections::BTreeSet::new();
    while keys.len() < cfg.lookup_keys {
        let k: Vec<usize> = (0..cfg.lookup_key_len)
            .map(|_| rng.gen_range(0..cfg.content_size))
            .collect();
        if seen.insert(k.clone()) {
            keys.push(k);
        }
    }
    let answers = (0..cfg.lookup_keys)
        .map(|_| {
            (0..cfg.lookup_answer_len)
                .map(|_| rng.gen_range(0..cfg.content_size))
                .collect()
        })
        .collect();
    LookupTable { keys, answers }
}

fn sample_split(
    cfg: &CorpusConfig,
    pair: &LanguagePair,
    table: &LookupTable,
    n: usize,
    lang_weights: [f64; 2],
    rng: &mut ChaCha8Rng,
) -> Vec<ParallelExample> {
    let lang_counts = apportion(n, &lang_weights);
    let mix: Vec<f64> = cfg.task_mix.entries().iter().map(|e| e.1).collect();
    let mut slots = Vec::with_capacity(n);
    for (lang, count) in [Lang::LangA, Lang::LangB].into_iter().zip(lang_counts) {
        for (task_idx, c) in apportion(count, &mix).into_iter().enumerate() {
            slots.extend(std::iter::repeat((lang, cfg.task_mix.entries()[task_idx].0)).take(c));
        }
    }
    slots.shuffle(rng);
    slots
        .into_iter()
        .enumerate()
        .map(|(id, (lang, task))| {
            // content indices, language independent
            let (x_idx, y_idx): (Vec<usize>, Vec<usize>) = match task {
                TaskKind::Lookup => {
                    let k = rng.gen_range(0..table.keys.len());
                    (table.keys[k].clone(), table.answers[k].clone())
                }
                _ => {
                    let len = rng.gen_range(cfg.min_len..=cfg.max_len);
                    let x: Vec<usize> = (0..len)
                        .map(|_| rng.gen_range(0..cfg.content_size))
                        .collect();
                    let y = if task == TaskKind::Reverse {
                        x.iter().rev().copied().collect()
                    } else {
                        x.clone()
                    };
                    (x, y)
                }
            };
            let in_a = |idx: &[usize]| idx.iter().map(|&i| pair.a.token(i)).collect::<Vec<_>>();
            let x_en = in_a(&x_idx);
            let (x, y) = match lang {
                Lang::LangA => (x_en.clone(), in_a(&y_idx)),
                Lang::LangB => (pair.seq_to_b(&x_en), pair.seq_to_b(&in_a(&y_idx))),
            };
            ParallelExample {
                id: id as u64,
                lang,
                task,
                x,
                x_en: Some(x_en),
                y,
            }
        })
        .collect()
}

/// Samples the training and test splits. Deterministic in `config.seed`.
///
/// Training language counts follow the resource weights exactly (largest
/// remainder rounding); the test split is balanced between languages.
pub fn generate_parallel_corpus(config: &CorpusConfig) -> Result<GeneratedCorpus> {
    config.validate()?;
    let mut world = ChaCha8Rng::seed_from_u64(config.seed);
    let pair = LanguagePair::new(
        config.content_size,
        config.weight_a,
        config.weight_b,
        world.gen(),
    )?;
    let lookup = build_lookup(config, &mut world);
    let mut train_rng = ChaCha8Rng::seed_from_u64(world.gen());
    let mut test_rng = ChaCha8Rng::seed_from_u64(world.gen());
    let train = sample_split(
        config,
        &pair,
        &lookup,
        config.n_examples,
        [config.weight_a, config.weight_b],
        &mut train_rng,
    );
    let test = sample_split(
        config,
        &pair,
        &lookup,
        config.n_test,
        [1.0, 1.0],
        &mut test_rng,
    );
    Ok(GeneratedCorpus {
        train,
        test,
        languages: pair,
        lookup,
        config: config.clone(),
    })
}

fn entry(path: &str, records: &[ParallelExample]) -> FileEntry {
    let mut by_lang = BTreeMap::new();
    let mut by_task = BTreeMap::new();
    for r in records {
        *by_lang.entry(r.lang.to_string()).or_insert(0) += 1;
        *by_task.entry(r.task.to_string()).or_insert(0) += 1;
    }
    FileEntry {
        path: path.to_string(),
        records: records.len(),
        by_lang,
        by_task,
    }
}

/// Writes `train.jsonl`, `test.jsonl`, the augmented training sets
/// `train.en.jsonl` / `train.mt.jsonl`, and `manifest.json` into `dir`.
pub fn write_corpus(dir: &Path, corpus: &GeneratedCorpus) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir)?;
    let en = augment_with_english(&corpus.train, &corpus.languages)?;
    let mt = augment_with_mt(&corpus.train, &corpus.languages)?;
    let splits: [(&str, &[ParallelExample]); 4] = [
        ("train.jsonl", &corpus.train),
        ("test.jsonl", &corpus.test),
        ("train.en.jsonl", &en),
        ("train.mt.jsonl", &mt),
    ];
    let mut files = Vec::new();
    for (name, records) in splits {
        write_jsonl(&dir.join(name), records)?;
        files.push(entry(name, records));
    }
    let by_augmentation = BTreeMap::from([
        ("none".to_string(), corpus.train.len()),
        ("en".to_string(), en.len()),
        ("mt".to_string(), mt.len()),
    ]);
    let manifest = DatasetManifest {
        seed: corpus.config.seed,
        files,
        by_augmentation,
        config: corpus.config.clone(),
        languages: corpus.languages.clone(),
        lookup: corpus.lookup.clone(),
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(manifest)
}

/// Reads `manifest.json` from a corpus directory.
pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.json");
    if !path.exists() {
        return Err(Error::MissingPath(path));
    }
    let mut m: DatasetManifest = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    m.languages = m.languages.rebuilt()?;
    Ok(m)
}
