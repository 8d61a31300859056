//! Reference-embedding construction and corpus generation.

use super::{Corpus, CorpusConfig, Example, ReferenceEmbeddingTable, Vocabulary, CLS, PAD};
use crate::error::{Error, Result};
use crate::rng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;

/// Place one centroid per synonym set on a sphere with pairwise distance
/// >= 3 epsilon, then scatter members within epsilon/2 of their centroid, so
/// intra-set distances stay <= epsilon by the triangle inequality. The sphere
/// radius escalates when rejection sampling stalls.
pub fn build_reference_embeddings(
    vocab: &Vocabulary,
    dim: usize,
    epsilon: f64,
    seed: u64,
) -> Result<ReferenceEmbeddingTable> {
    if dim < 2 {
        return Err(Error::CorpusConfig(format!("embed_dim {dim} must be >= 2")));
    }
    if !(epsilon > 0.0) {
        return Err(Error::CorpusConfig(format!("epsilon {epsilon} must be > 0")));
    }
    let mut r = rng::stream(seed, "reference-embeddings");
    let num_sets = vocab.num_sets();
    let min_dist = 3.0 * epsilon;

    let mut radius: f64 = 1.0_f64.max(min_dist);
    let mut centroids: Vec<Vec<f64>> = Vec::new();
    let mut attempts_total = 0usize;
    'placement: for _round in 0..12 {
        centroids.clear();
        let mut stalled = false;
        for _s in 0..num_sets {
            let mut placed = false;
            for _try in 0..200 {
                attempts_total += 1;
                let c = rng::sphere_point(&mut r, dim, radius);
                let ok = centroids.iter().all(|other| dist(&c, other) >= min_dist);
                if ok {
                    centroids.push(c);
                    placed = true;
                    break;
                }
            }
            if !placed {
                stalled = true;
                break;
            }
        }
        if !stalled {
            break 'placement;
        }
        radius *= 1.5;
        if _round == 11 {
            return Err(Error::CentroidPlacement {
                attempts: attempts_total,
            });
        }
    }
    if centroids.len() != num_sets {
        return Err(Error::CentroidPlacement {
            attempts: attempts_total,
        });
    }

    let mut vectors = vec![0.0; vocab.len() * dim];
    // PAD stays at the origin; CLS gets its own off-sphere direction.
    let cls_vec = rng::sphere_point(&mut r, dim, radius);
    vectors[CLS * dim..(CLS + 1) * dim].copy_from_slice(&cls_vec);
    for s in 0..num_sets {
        for &id in vocab.members(s) {
            let jitter = rng::ball_point(&mut r, dim, epsilon / 2.0);
            for j in 0..dim {
                vectors[id * dim + j] = centroids[s][j] + jitter[j];
            }
        }
    }
    let table = ReferenceEmbeddingTable::new(dim, epsilon, vectors);

    // Verify the advertised geometry exhaustively before returning.
    for s in 0..num_sets {
        let members = vocab.members(s);
        for (i, &a) in members.iter().enumerate() {
            for &b in &members[i + 1..] {
                let d = table.distance(a, b);
                if d > epsilon {
                    return Err(Error::CorpusConfig(format!(
                        "intra-set distance {d} exceeds epsilon {epsilon} in set {s}"
                    )));
                }
            }
        }
    }
    for s1 in 0..num_sets {
        for s2 in s1 + 1..num_sets {
            for &a in vocab.members(s1) {
                for &b in vocab.members(s2) {
                    let d = table.distance(a, b);
                    if d < 2.0 * epsilon {
                        return Err(Error::CorpusConfig(format!(
                            "inter-set distance {d} between sets {s1},{s2} violates the margin"
                        )));
                    }
                }
            }
        }
    }
    Ok(table)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn sample_member(r: &mut ChaCha8Rng, members: &[usize], skew: f64) -> usize {
    if skew >= 1.0 {
        return members[r.random_range(0..members.len())];
    }
    let weights: Vec<f64> = (0..members.len()).map(|k| skew.powi(k as i32)).collect();
    let total: f64 = weights.iter().sum();
    let mut u = r.random::<f64>() * total;
    for (k, w) in weights.iter().enumerate() {
        if u < *w {
            return members[k];
        }
        u -= w;
    }
    members[members.len() - 1]
}

/// Generate disjoint train/dev/test splits with a class-balanced,
/// substitution-invariant labeling.
pub fn generate_corpus(config: &CorpusConfig, seed: u64) -> Result<Corpus> {
    config.validate()?;
    let vocab = Vocabulary::synthetic(config.num_sets, config.set_size)?;
    let mut seen: HashSet<Vec<usize>> = HashSet::new();

    let sets_of_class: Vec<Vec<usize>> = (0..config.num_classes)
        .map(|c| {
            (0..config.indicator_sets)
                .filter(|s| s % config.num_classes == c)
                .collect()
        })
        .collect();
    let distractor_sets: Vec<usize> = (config.indicator_sets..config.num_sets).collect();

    let mut make_split = |name: &str, count: usize| -> Result<Vec<Example>> {
        let mut r = rng::stream(seed, &format!("corpus-{name}"));
        let mut out = Vec::with_capacity(count);
        for i in 0..count {
            let class = i % config.num_classes;
            let mut tokens = Vec::new();
            for _attempt in 0..1000 {
                let len = r.random_range(config.min_tokens..=config.max_tokens);
                let set = sets_of_class[class][r.random_range(0..sets_of_class[class].len())];
                let mut positions: Vec<usize> = (0..len).collect();
                // Partial Fisher-Yates: first k entries become indicator slots.
                for k in 0..config.indicators_per_example {
                    let j = r.random_range(k..len);
                    positions.swap(k, j);
                }
                tokens = vec![0usize; len];
                for (slot, &p) in positions.iter().enumerate() {
                    let from_set = if slot < config.indicators_per_example {
                        set
                    } else {
                        distractor_sets[r.random_range(0..distractor_sets.len())]
                    };
                    tokens[p] = sample_member(&mut r, vocab.members(from_set), config.member_skew);
                }
                if seen.insert(tokens.clone()) {
                    break;
                }
                tokens.clear();
            }
            if tokens.is_empty() {
                return Err(Error::CorpusConfig(
                    "could not generate enough distinct examples; enlarge the vocabulary or shorten splits"
                        .into(),
                ));
            }
            let n = tokens.len();
            let mut token_ids = Vec::with_capacity(n + 1);
            token_ids.push(CLS);
            token_ids.extend_from_slice(&tokens);
            let label = super::oracle_label(
                &vocab,
                config.indicator_sets,
                config.num_classes,
                &token_ids,
                n,
            )
            .expect("generated example always contains an indicator set");
            debug_assert_eq!(label, class);
            out.push(Example {
                token_ids,
                label,
                n,
            });
        }
        Ok(out)
    };

    let train = make_split("train", config.train_n)?;
    let dev = make_split("dev", config.dev_n)?;
    let test = make_split("test", config.test_n)?;

    let mut corpus = Corpus {
        vocab,
        train,
        dev,
        test,
    };
    let pad_len = corpus
        .train
        .iter()
        .chain(&corpus.dev)
        .chain(&corpus.test)
        .map(|e| e.n + 1)
        .max()
        .unwrap_or(1);
    for split in [&mut corpus.train, &mut corpus.dev, &mut corpus.test] {
        for e in split.iter_mut() {
            e.token_ids.resize(pad_len, PAD);
        }
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::oracle_label;

    fn small_config() -> CorpusConfig {
        CorpusConfig {
            num_sets: 10,
            set_size: 3,
            num_classes: 3,
            indicator_sets: 6,
            indicators_per_example: 2,
            train_n: 60,
            dev_n: 30,
            test_n: 30,
            min_tokens: 5,
            max_tokens: 8,
            embed_dim: 8,
            epsilon: 0.1,
            member_skew: 0.5,
        }
    }

    #[test]
    fn embedding_geometry_holds_exhaustively() {
        let vocab = Vocabulary::synthetic(2, 4).unwrap();
        let table = build_reference_embeddings(&vocab, 8, 0.1, 5).unwrap();
        for s in 0..2 {
            let members = vocab.members(s);
            for &a in members {
                for &b in members {
                    assert!(table.distance(a, b) <= 0.1 + 1e-12);
                }
            }
        }
        for &a in vocab.members(0) {
            for &b in vocab.members(1) {
                assert!(table.distance(a, b) >= 0.3 - 1e-12);
            }
        }
    }

    #[test]
    fn same_seed_gives_bit_identical_tables() {
        let vocab = Vocabulary::synthetic(5, 3).unwrap();
        let a = build_reference_embeddings(&vocab, 8, 0.2, 9).unwrap();
        let b = build_reference_embeddings(&vocab, 8, 0.2, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn singleton_sets_are_rejected() {
        assert!(Vocabulary::synthetic(4, 1).is_err());
    }

    #[test]
    fn generated_labels_survive_any_single_synonym_swap() {
        let cfg = small_config();
        let corpus = generate_corpus(&cfg, 3).unwrap();
        for e in corpus.train.iter().take(30) {
            for p in e.word_positions() {
                for syn in corpus.vocab.synonyms(e.token_ids[p]) {
                    let mut swapped = e.token_ids.clone();
                    swapped[p] = syn;
                    let relabeled = oracle_label(
                        &corpus.vocab,
                        cfg.indicator_sets,
                        cfg.num_classes,
                        &swapped,
                        e.n,
                    );
                    assert_eq!(relabeled, Some(e.label));
                }
            }
        }
    }

    #[test]
    fn disjoint_seeds_differ() {
        let cfg = small_config();
        let a = generate_corpus(&cfg, 1).unwrap();
        let b = generate_corpus(&cfg, 2).unwrap();
        assert_ne!(a.train, b.train);
    }

    #[test]
    fn class_histogram_is_near_uniform() {
        let mut cfg = small_config();
        cfg.train_n = 1000;
        let corpus = generate_corpus(&cfg, 11).unwrap();
        let mut counts = vec![0usize; cfg.num_classes];
        for e in &corpus.train {
            counts[e.label] += 1;
        }
        let expect = cfg.train_n as f64 / cfg.num_classes as f64;
        for c in counts {
            assert!((c as f64 - expect).abs() <= 0.1 * expect, "count {c}");
        }
    }

    #[test]
    fn splits_are_disjoint_multisets() {
        let cfg = small_config();
        let corpus = generate_corpus(&cfg, 21).unwrap();
        let mut seen = std::collections::HashSet::new();
        for e in corpus
            .train
            .iter()
            .chain(&corpus.dev)
            .chain(&corpus.test)
        {
            assert!(seen.insert(e.token_ids.clone()), "duplicate sequence across splits");
        }
    }

    #[test]
    fn inconsistent_class_count_is_rejected() {
        let mut cfg = small_config();
        cfg.num_classes = 7;
        cfg.indicator_sets = 5;
        assert!(matches!(
            generate_corpus(&cfg, 0),
            Err(Error::CorpusConfig(_))
        ));
    }

    #[test]
    fn substitution_distortion_respects_epsilon() {
        let cfg = small_config();
        let corpus = generate_corpus(&cfg, 30).unwrap();
        let table =
            build_reference_embeddings(&corpus.vocab, cfg.embed_dim, cfg.epsilon, 30).unwrap();
        for e in corpus.dev.iter().take(20) {
            for p in e.word_positions() {
                for syn in corpus.vocab.synonyms(e.token_ids[p]) {
                    assert!(table.distance(e.token_ids[p], syn) <= cfg.epsilon + 1e-12);
                }
            }
        }
    }
}
