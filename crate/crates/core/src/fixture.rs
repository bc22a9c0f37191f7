//! Synthetic desk-scale inputs: planted preference blocks, a stub vocabulary
//! with themed word clusters, and summaries built from the theme words.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::write_f32_matrix;
use crate::error::{FaceError, Result};

pub const THEMES: [[&str; 10]; 4] = [
    ["mystery", "dark", "thriller", "crime", "detective", "murder", "secret", "shadow", "clue", "suspect"],
    ["romance", "love", "heart", "passion", "wedding", "kiss", "desire", "tender", "charm", "longing"],
    ["galaxy", "rocket", "planet", "alien", "orbit", "star", "cosmic", "robot", "starship", "nebula"],
    ["empire", "war", "king", "castle", "battle", "ancient", "throne", "medieval", "knight", "siege"],
];

/// Raw vocabulary entries the filter must drop.
const NOISE_TOKENS: [&str; 12] = ["##ing", "##ed", "##ly", "##er", "42", "7", "2020", "x1", "a", "of", "the", "and"];

#[derive(Clone, Debug)]
pub struct FixtureSpec {
    pub users: usize,
    pub items: usize,
    pub blocks: usize,
    /// Interactions per user inside its own block.
    pub in_block: usize,
    /// Interactions per user outside its block.
    pub off_block: usize,
    /// Words in the allowlisted stub vocabulary, theme words included.
    pub vocab_words: usize,
    pub llm_dim: usize,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            users: 200,
            items: 100,
            blocks: 4,
            in_block: 10,
            off_block: 2,
            vocab_words: 500,
            llm_dim: 64,
            seed: 11,
        }
    }
}

impl FixtureSpec {
    pub fn block_of_user(&self, u: usize) -> usize {
        u % self.blocks
    }

    pub fn block_of_item(&self, i: usize) -> usize {
        i % self.blocks
    }
}

fn unit(v: Array1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt();
    v / n
}

fn gaussian<R: Rng>(dim: usize, rng: &mut R) -> Array1<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

/// Deterministic pronounceable filler words, distinct from the theme words.
fn filler_words<R: Rng>(count: usize, rng: &mut R) -> Vec<String> {
    const ONSETS: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
    const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
    let taken: std::collections::HashSet<&str> = THEMES.iter().flatten().copied().collect();
    let mut out = Vec::with_capacity(count);
    let mut seen = std::collections::HashSet::new();
    while out.len() < count {
        let syllables = rng.random_range(2..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(ONSETS.choose(rng).unwrap());
            w.push_str(VOWELS.choose(rng).unwrap());
        }
        if !taken.contains(w.as_str()) && seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

/// Writes `interactions.tsv`, `summaries.jsonl`, `wordlist.txt`,
/// `vocab_tokens.txt` and `vocab_embeddings.bin` into `dir`.
pub fn write_fixture(dir: &Path, spec: &FixtureSpec) -> Result<()> {
    if spec.blocks == 0 || spec.blocks > THEMES.len() {
        return Err(FaceError::Config(format!("fixture supports 1..={} blocks", THEMES.len())));
    }
    let per_block = spec.items / spec.blocks;
    if spec.in_block > per_block || spec.off_block > spec.items - per_block {
        return Err(FaceError::Config("fixture blocks are too small for the requested degrees".into()));
    }
    let themed: usize = THEMES.iter().take(spec.blocks).map(|t| t.len()).sum();
    if spec.vocab_words < themed {
        return Err(FaceError::Config(format!("vocabulary needs at least {themed} words")));
    }
    fs::create_dir_all(dir).map_err(|e| FaceError::io(dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // interactions
    let mut lines = Vec::new();
    for u in 0..spec.users {
        let b = spec.block_of_user(u);
        let own: Vec<usize> = (0..spec.items).filter(|&i| spec.block_of_item(i) == b).collect();
        let other: Vec<usize> = (0..spec.items).filter(|&i| spec.block_of_item(i) != b).collect();
        for &i in own.choose_multiple(&mut rng, spec.in_block) {
            lines.push(format!("u{u:03}\ti{i:03}"));
        }
        for &i in other.choose_multiple(&mut rng, spec.off_block) {
            lines.push(format!("u{u:03}\ti{i:03}"));
        }
    }
    lines.shuffle(&mut rng);
    write_text(&dir.join("interactions.tsv"), &(lines.join("\n") + "\n"))?;

    // vocabulary: theme words cluster around a per-block center
    let fillers = filler_words(spec.vocab_words - themed, &mut rng);
    let centers: Vec<Array1<f64>> = (0..spec.blocks).map(|_| unit(gaussian(spec.llm_dim, &mut rng))).collect();
    let mut tokens: Vec<String> = Vec::new();
    let mut rows: Vec<Array1<f64>> = Vec::new();
    for (b, theme) in THEMES.iter().take(spec.blocks).enumerate() {
        for w in theme {
            tokens.push(format!("\u{0120}{w}"));
            rows.push(unit(&centers[b] * 0.8 + unit(gaussian(spec.llm_dim, &mut rng)) * 0.6));
        }
    }
    for w in &fillers {
        tokens.push(format!("\u{0120}{w}"));
        rows.push(unit(gaussian(spec.llm_dim, &mut rng)));
    }
    for t in NOISE_TOKENS {
        tokens.push(t.to_string());
        rows.push(unit(gaussian(spec.llm_dim, &mut rng)));
    }
    let mut order: Vec<usize> = (0..tokens.len()).collect();
    order.shuffle(&mut rng);
    let tokens: Vec<String> = order.iter().map(|&k| tokens[k].clone()).collect();
    let mut emb = Array2::<f32>::zeros((tokens.len(), spec.llm_dim));
    for (r, &k) in order.iter().enumerate() {
        emb.row_mut(r).assign(&rows[k].mapv(|v| v as f32));
    }
    write_text(&dir.join("vocab_tokens.txt"), &(tokens.join("\n") + "\n"))?;
    write_f32_matrix(&dir.join("vocab_embeddings.bin"), emb.view())?;

    let mut words: Vec<String> = THEMES.iter().take(spec.blocks).flatten().map(|w| w.to_string()).collect();
    words.extend(fillers.iter().cloned());
    words.push("unused".into());
    write_text(&dir.join("wordlist.txt"), &(words.join("\n") + "\n"))?;

    // summaries
    let mut body = String::new();
    for u in 0..spec.users {
        let theme = &THEMES[spec.block_of_user(u)];
        let picked: Vec<&str> = theme.choose_multiple(&mut rng, 4).copied().collect();
        let text = format!(
            "A reader who enjoys {} and {} stories full of {} and {}.",
            picked[0], picked[1], picked[2], picked[3]
        );
        writeln!(body, "{}", serde_json::json!({"kind": "user", "id": format!("u{u:03}"), "summary": text})).unwrap();
    }
    for i in 0..spec.items {
        let theme = &THEMES[spec.block_of_item(i)];
        let picked: Vec<&str> = theme.choose_multiple(&mut rng, 3).copied().collect();
        let filler = fillers.choose(&mut rng).unwrap();
        let text = format!("A {} {} novel about {} and the {filler}.", picked[0], picked[1], picked[2]);
        writeln!(body, "{}", serde_json::json!({"kind": "item", "id": format!("i{i:03}"), "summary": text})).unwrap();
    }
    write_text(&dir.join("summaries.jsonl"), &body)
}

fn write_text(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| FaceError::io(path, e))
}
