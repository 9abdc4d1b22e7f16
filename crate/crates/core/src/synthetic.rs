//! Planted-preference fixture generator.
//!
//! Users and items are split into latent blocks. Each user interacts
//! almost exclusively with items in their own block, choosing items by
//! a Zipf-like popularity profile. Descriptions and comments are written
//! from a block-specific vocabulary, and a matching word-vector table
//! gives every block word a vector near its block centroid. This lets
//! the whole text → graph → propagation → training pipeline be tested
//! with a known correct answer.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::corpus::{DescriptionRecord, ReviewRecord};
use crate::error::{Error, Result};
use crate::textembed::WordVectorTable;

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedSpec {
    pub users: usize,
    pub blocks: usize,
    pub items_per_block: usize,
    pub interactions_per_user: usize,
    /// Probability that an interaction leaves the user's block.
    pub cross_block_rate: f64,
    /// Popularity of the r-th item of a block is proportional to `1 / r^s`.
    pub zipf_exponent: f64,
    pub words_per_block: usize,
    /// Shared filler words whose vectors carry no block information.
    pub noise_words: usize,
    pub words_per_text: usize,
    pub dimension: usize,
    /// Scale of the per-word noise around a block centroid.
    pub word_noise: f64,
    pub seed: u64,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        PlantedSpec {
            users: 200,
            blocks: 2,
            items_per_block: 100,
            interactions_per_user: 20,
            cross_block_rate: 0.0,
            zipf_exponent: 1.0,
            words_per_block: 40,
            noise_words: 40,
            words_per_text: 8,
            dimension: 256,
            word_noise: 0.5,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlantedFixture {
    pub spec: PlantedSpec,
    pub reviews: Vec<ReviewRecord>,
    pub descriptions: Vec<DescriptionRecord>,
    pub word_vectors: WordVectorTable,
    /// Ordered vocabulary of `word_vectors`, for writing it back out.
    pub words: Vec<String>,
    pub user_block: Vec<usize>,
    pub item_block: Vec<usize>,
}

pub fn user_key(u: usize) -> String {
    format!("U{u:05}")
}

pub fn item_key(i: usize) -> String {
    format!("I{i:05}")
}

fn block_word(b: usize, j: usize) -> String {
    format!("blk{b}w{j}")
}

fn noise_word(j: usize) -> String {
    format!("common{j}")
}

fn uniform_vector<R: Rng>(rng: &mut R, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|_| rng.gen_range(-scale..scale)).collect()
}

impl PlantedSpec {
    fn validate(&self) -> Result<()> {
        if self.users == 0 || self.blocks == 0 || self.items_per_block == 0 || self.dimension == 0 {
            return Err(Error::InvalidArgument("planted fixture sizes must be positive".into()));
        }
        if self.interactions_per_user > self.items_per_block {
            return Err(Error::InvalidArgument("more interactions per user than items per block".into()));
        }
        if !(0.0..=1.0).contains(&self.cross_block_rate) {
            return Err(Error::InvalidArgument("cross-block rate must be a probability".into()));
        }
        if self.words_per_block == 0 || self.words_per_text == 0 {
            return Err(Error::InvalidArgument("texts need at least one block word".into()));
        }
        Ok(())
    }

    pub fn num_items(&self) -> usize {
        self.blocks * self.items_per_block
    }

    pub fn generate(&self) -> Result<PlantedFixture> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let dim = self.dimension;

        let mut table = WordVectorTable::new(dim);
        let mut words = Vec::new();
        for b in 0..self.blocks {
            let centroid = uniform_vector(&mut rng, dim, 1.0);
            for j in 0..self.words_per_block {
                let v: Vec<f64> =
                    centroid.iter().zip(uniform_vector(&mut rng, dim, self.word_noise)).map(|(c, n)| c + n).collect();
                let w = block_word(b, j);
                table.insert(&w, &v)?;
                words.push(w);
            }
        }
        for j in 0..self.noise_words {
            let w = noise_word(j);
            table.insert(&w, &uniform_vector(&mut rng, dim, 1.0))?;
            words.push(w);
        }

        let text = |rng: &mut ChaCha8Rng, block: usize| -> String {
            let mut out = Vec::with_capacity(self.words_per_text);
            for _ in 0..self.words_per_text {
                if self.noise_words > 0 && rng.gen_bool(0.25) {
                    out.push(noise_word(rng.gen_range(0..self.noise_words)));
                } else {
                    out.push(block_word(block, rng.gen_range(0..self.words_per_block)));
                }
            }
            // Stopwords exercise the tokenizer; they never reach the table.
            out.insert(out.len() / 2, "the".to_string());
            out.join(" ")
        };

        let item_block: Vec<usize> = (0..self.num_items()).map(|i| i / self.items_per_block).collect();
        let descriptions = (0..self.num_items())
            .map(|i| DescriptionRecord { item_key: item_key(i), description_text: text(&mut rng, item_block[i]) })
            .collect();

        let popularity = WeightedIndex::new(
            (1..=self.items_per_block).map(|r| 1.0 / (r as f64).powf(self.zipf_exponent)),
        )
        .expect("positive weights");
        let mut user_block = Vec::with_capacity(self.users);
        let mut reviews = Vec::with_capacity(self.users * self.interactions_per_user);
        for u in 0..self.users {
            let home = u % self.blocks;
            user_block.push(home);
            let mut chosen = Vec::with_capacity(self.interactions_per_user);
            while chosen.len() < self.interactions_per_user {
                let block = if self.blocks > 1 && rng.gen_bool(self.cross_block_rate) {
                    let others: Vec<usize> = (0..self.blocks).filter(|&b| b != home).collect();
                    *others.choose(&mut rng).expect("at least one other block")
                } else {
                    home
                };
                let item = block * self.items_per_block + popularity.sample(&mut rng);
                if !chosen.contains(&item) {
                    chosen.push(item);
                }
            }
            let mut times: Vec<u64> = (0..chosen.len() as u64).map(|t| 1_000_000 + t * 86_400).collect();
            times.shuffle(&mut rng);
            for (item, timestamp) in chosen.into_iter().zip(times) {
                reviews.push(ReviewRecord {
                    user_key: user_key(u),
                    item_key: item_key(item),
                    rating: rng.gen_range(1..=5) as f64,
                    comment_text: text(&mut rng, item_block[item]),
                    timestamp,
                });
            }
        }

        Ok(PlantedFixture { spec: self.clone(), reviews, descriptions, word_vectors: table, words, user_block, item_block })
    }
}

/// Paths written by [`PlantedFixture::write_files`].
#[derive(Debug, Clone)]
pub struct FixtureFiles {
    pub reviews: PathBuf,
    pub meta: PathBuf,
    pub glove: PathBuf,
}

impl PlantedFixture {
    /// Writes review and metadata JSON lines and a text word-vector table
    /// in the same formats as the real inputs.
    pub fn write_files(&self, dir: &Path) -> Result<FixtureFiles> {
        std::fs::create_dir_all(dir)?;
        let files = FixtureFiles {
            reviews: dir.join("reviews.json"),
            meta: dir.join("meta.json"),
            glove: dir.join("vectors.txt"),
        };
        let mut out = BufWriter::new(File::create(&files.reviews)?);
        for r in &self.reviews {
            let line = json!({
                "reviewerID": r.user_key,
                "asin": r.item_key,
                "overall": r.rating,
                "reviewText": r.comment_text,
                "unixReviewTime": r.timestamp,
            });
            writeln!(out, "{line}")?;
        }
        out.flush()?;

        let mut out = BufWriter::new(File::create(&files.meta)?);
        for d in &self.descriptions {
            writeln!(out, "{}", json!({ "asin": d.item_key, "description": d.description_text }))?;
        }
        out.flush()?;

        let mut out = BufWriter::new(File::create(&files.glove)?);
        for w in &self.words {
            let v = self.word_vectors.get(w).expect("every listed word is in the table");
            write!(out, "{w}")?;
            for x in v {
                write!(out, " {x}")?;
            }
            writeln!(out)?;
        }
        out.flush()?;
        Ok(files)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn sizes_and_blocks() {
        let f = PlantedSpec::default().generate().unwrap();
        assert_eq!(f.reviews.len(), 200 * 20);
        assert_eq!(f.descriptions.len(), 200);
        for r in &f.reviews {
            let u: usize = r.user_key[1..].parse().unwrap();
            let i: usize = r.item_key[1..].parse().unwrap();
            assert_eq!(f.user_block[u], f.item_block[i]);
        }
        let pairs: HashSet<_> = f.reviews.iter().map(|r| (&r.user_key, &r.item_key)).collect();
        assert_eq!(pairs.len(), f.reviews.len());
    }

    #[test]
    fn seeded() {
        let a = PlantedSpec::default().generate().unwrap();
        let b = PlantedSpec::default().generate().unwrap();
        assert_eq!(a.reviews, b.reviews);
        let c = PlantedSpec { seed: 8, ..Default::default() }.generate().unwrap();
        assert_ne!(a.reviews, c.reviews);
    }

    #[test]
    fn rejects_impossible_spec() {
        assert!(PlantedSpec { interactions_per_user: 101, ..Default::default() }.generate().is_err());
    }
}
