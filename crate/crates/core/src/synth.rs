//! Templated synthetic corpus with controlled paraphrase structure.
//!
//! A sentence realizes a tuple of four concepts (agent, action, object,
//! place). Each concept has three interchangeable surface words and there
//! are three sentence templates over the same function words, so two
//! sentences can share every concept while sharing few content words.
//! Actions, objects and places lean towards the agent's class, which gives
//! synonyms a shared context distribution. Pair gold scores count shared
//! concepts: `gold = 5 * shared / 4`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const AGENTS: [[&str; 3]; 12] = [
    ["dog", "puppy", "hound"],
    ["cat", "kitten", "feline"],
    ["horse", "stallion", "mare"],
    ["bird", "sparrow", "finch"],
    ["teacher", "tutor", "instructor"],
    ["doctor", "physician", "medic"],
    ["farmer", "grower", "rancher"],
    ["child", "kid", "youngster"],
    ["robot", "android", "automaton"],
    ["truck", "lorry", "van"],
    ["drone", "quadcopter", "aircraft"],
    ["tractor", "harvester", "plough"],
];

/// Agents come in three classes of four: animals, people, machines.
const AGENTS_PER_CLASS: usize = 4;
pub const NUM_CLASSES: usize = 3;

const ACTIONS: [[&str; 3]; 10] = [
    ["moved", "shifted", "relocated"],
    ["found", "discovered", "located"],
    ["carried", "hauled", "transported"],
    ["watched", "observed", "viewed"],
    ["pushed", "shoved", "nudged"],
    ["cleaned", "washed", "scrubbed"],
    ["broke", "smashed", "shattered"],
    ["painted", "coloured", "decorated"],
    ["lifted", "raised", "hoisted"],
    ["hid", "concealed", "stashed"],
];

const OBJECTS: [[&str; 3]; 10] = [
    ["box", "crate", "carton"],
    ["ball", "sphere", "orb"],
    ["rope", "cord", "cable"],
    ["basket", "hamper", "bin"],
    ["book", "volume", "tome"],
    ["bottle", "flask", "jar"],
    ["chair", "stool", "seat"],
    ["lamp", "lantern", "torch"],
    ["stone", "rock", "pebble"],
    ["blanket", "quilt", "rug"],
];

const PLACES: [[&str; 3]; 8] = [
    ["park", "garden", "meadow"],
    ["kitchen", "pantry", "scullery"],
    ["barn", "stable", "shed"],
    ["street", "road", "avenue"],
    ["school", "academy", "college"],
    ["market", "bazaar", "shop"],
    ["forest", "woods", "grove"],
    ["beach", "shore", "coast"],
];

const SLOT_SIZES: [usize; 4] = [AGENTS.len(), ACTIONS.len(), OBJECTS.len(), PLACES.len()];

/// Concept indices for (agent, action, object, place).
pub type Concepts = [usize; 4];

pub fn realize(c: &Concepts, rng: &mut impl Rng) -> String {
    let mut w = |table: &[[&'static str; 3]], i: usize| table[i][rng.random_range(0..3)];
    let (s, v, o, p) = (w(&AGENTS, c[0]), w(&ACTIONS, c[1]), w(&OBJECTS, c[2]), w(&PLACES, c[3]));
    match rng.random_range(0..3) {
        0 => format!("the {s} {v} the {o} in the {p}"),
        1 => format!("in the {p} the {s} {v} the {o}"),
        _ => format!("the {s} in the {p} {v} the {o}"),
    }
}

/// Probability that a non-agent slot is drawn from the agent's class.
const TOPIC_AFFINITY: f64 = 0.8;

fn random_concepts(rng: &mut impl Rng) -> Concepts {
    let agent = rng.random_range(0..AGENTS.len());
    let class = agent / AGENTS_PER_CLASS;
    let mut c = [agent, 0, 0, 0];
    for s in 1..4 {
        c[s] = if rng.random::<f64>() < TOPIC_AFFINITY {
            // Concepts whose index is congruent to the class.
            let n = (SLOT_SIZES[s] - class).div_ceil(NUM_CLASSES);
            class + NUM_CLASSES * rng.random_range(0..n)
        } else {
            rng.random_range(0..SLOT_SIZES[s])
        };
    }
    c
}

/// A tuple sharing exactly `shared` slots with `base`.
fn with_overlap(base: &Concepts, shared: usize, rng: &mut impl Rng) -> Concepts {
    let mut slots = [0usize, 1, 2, 3];
    for i in (1..4).rev() {
        slots.swap(i, rng.random_range(0..=i));
    }
    let mut out = *base;
    for &s in &slots[shared..] {
        let mut v = rng.random_range(0..SLOT_SIZES[s] - 1);
        if v >= base[s] {
            v += 1;
        }
        out[s] = v;
    }
    out
}

pub fn gold_score(a: &Concepts, b: &Concepts) -> f64 {
    5.0 * a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / 4.0
}

pub fn agent_class(c: &Concepts) -> usize {
    c[0] / AGENTS_PER_CLASS
}

/// Generated file contents.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub corpus: String,
    pub score_pairs: String,
    pub eval_pairs: String,
    pub probe_train: String,
    pub probe_test: String,
}

pub const CORPUS_FILE: &str = "corpus.txt";
pub const SCORE_PAIRS_FILE: &str = "score_pairs.tsv";
pub const EVAL_PAIRS_FILE: &str = "eval_pairs.tsv";
pub const PROBE_TRAIN_FILE: &str = "probe_train.tsv";
pub const PROBE_TEST_FILE: &str = "probe_test.tsv";

pub const MIN_SENTENCES: usize = 100;

fn pairs(n: usize, rng: &mut ChaCha8Rng) -> String {
    let mut out = String::new();
    for i in 0..n {
        let a = random_concepts(rng);
        // Cycle through 0..=4 shared slots so every gold level is present.
        let b = with_overlap(&a, i % 5, rng);
        let (sa, sb) = (realize(&a, rng), realize(&b, rng));
        let _ = writeln!(out, "{sa}\t{sb}\t{}", gold_score(&a, &b));
    }
    out
}

fn labeled(n: usize, rng: &mut ChaCha8Rng) -> String {
    let mut out = String::new();
    for i in 0..n {
        // Balanced classes.
        let c = loop {
            let c = random_concepts(rng);
            if agent_class(&c) == i % NUM_CLASSES {
                break c;
            }
        };
        let _ = writeln!(out, "{}\t{}", agent_class(&c), realize(&c, rng));
    }
    out
}

/// `sentences` corpus lines plus scoring, evaluation and probe sets.
pub fn generate(sentences: usize, seed: u64) -> Result<SyntheticData> {
    if sentences < MIN_SENTENCES {
        return Err(Error::Config(format!(
            "need at least {MIN_SENTENCES} sentences, got {sentences}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut corpus = String::new();
    for _ in 0..sentences {
        let c = random_concepts(&mut rng);
        corpus.push_str(&realize(&c, &mut rng));
        corpus.push('\n');
    }
    Ok(SyntheticData {
        corpus,
        score_pairs: pairs(640, &mut rng),
        eval_pairs: pairs(500, &mut rng),
        probe_train: labeled(300, &mut rng),
        probe_test: labeled(150, &mut rng),
    })
}

impl SyntheticData {
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [
            (CORPUS_FILE, &self.corpus),
            (SCORE_PAIRS_FILE, &self.score_pairs),
            (EVAL_PAIRS_FILE, &self.eval_pairs),
            (PROBE_TRAIN_FILE, &self.probe_train),
            (PROBE_TEST_FILE, &self.probe_test),
        ] {
            crate::io::write_atomic(&dir.join(name), body.as_bytes())?;
        }
        Ok(())
    }
}
