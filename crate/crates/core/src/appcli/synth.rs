//! Small generated corpus with nested entities, used for overfit checks and
//! demos.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::data::{DatasetSample, EntitySpan, QuerySpec};

pub const PROTEIN: &str = "protein";
pub const DNA: &str = "DNA";
pub const CELL: &str = "cell_type";

const PROTEINS: &[&str] = &["PEBP2", "NFkB", "STAT3", "GATA1", "IL2", "CD28", "TNF", "Oct2", "p53", "AP1"];
const SUBUNITS: &[&str] = &["A1", "B1", "C2"];
const DNA_TAILS: &[&str] = &["promoter", "enhancer", "locus"];
const FLAT_DNA: &[&[&str]] = &[&["kappa", "B", "site"], &["TATA", "box"], &["long", "terminal", "repeat"]];
const FLAT_CELLS: &[&str] = &["monocytes", "macrophages", "neutrophils", "thymocytes"];
const FILLERS: &[&str] = &[
    "the", "of", "in", "and", "we", "show", "that", "expression", "was", "observed", "binding",
    "activates", "induces", "levels", "during", "human", "strongly", "after", "stimulation", "with",
    "requires", "both", "these", "results", "suggest", "regulates",
];
const ENDINGS: &[&str] = &["today", "here", "again", "overall"];

#[derive(Clone, Copy)]
enum Group {
    /// `P alpha X` with `P` inside, both proteins sharing a start.
    ProteinFamily,
    /// `P promoter` (DNA) containing `P` (protein).
    DnaOfProtein,
    /// `P positive T cells` (cell type) containing `P` (protein).
    CellOfProtein,
    Protein,
    Cell,
    Dna,
}

const GROUPS: [Group; 6] = [
    Group::ProteinFamily,
    Group::DnaOfProtein,
    Group::CellOfProtein,
    Group::Protein,
    Group::Cell,
    Group::Dna,
];

#[derive(Default)]
struct Builder {
    text: String,
    chars: usize,
    entities: Vec<EntitySpan>,
}

impl Builder {
    fn word(&mut self, w: &str) -> (usize, usize) {
        if !self.text.is_empty() {
            self.text.push(' ');
            self.chars += 1;
        }
        let start = self.chars;
        self.text.push_str(w);
        self.chars += w.chars().count();
        (start, self.chars)
    }

    fn entity(&mut self, t: &str, start: usize, end: usize) {
        self.entities.push(EntitySpan {
            entity_type: t.into(),
            start,
            end,
        });
    }

    fn fillers(&mut self, rng: &mut ChaCha8Rng, lo: usize, hi: usize) {
        for _ in 0..rng.gen_range(lo..=hi) {
            self.word(FILLERS.choose(rng).expect("fillers"));
        }
    }

    fn group(&mut self, g: Group, rng: &mut ChaCha8Rng) {
        let pick = |rng: &mut ChaCha8Rng, xs: &[&'static str]| *xs.choose(rng).expect("non-empty");
        match g {
            Group::ProteinFamily => {
                let (s, pe) = self.word(pick(rng, PROTEINS));
                self.word("alpha");
                let (_, e) = self.word(pick(rng, SUBUNITS));
                self.entity(PROTEIN, s, pe);
                self.entity(PROTEIN, s, e);
            }
            Group::DnaOfProtein => {
                let (s, pe) = self.word(pick(rng, PROTEINS));
                let (_, e) = self.word(pick(rng, DNA_TAILS));
                self.entity(PROTEIN, s, pe);
                self.entity(DNA, s, e);
            }
            Group::CellOfProtein => {
                let (s, pe) = self.word(pick(rng, PROTEINS));
                self.word("positive");
                self.word(pick(rng, &["T", "B"]));
                let (_, e) = self.word("cells");
                self.entity(PROTEIN, s, pe);
                self.entity(CELL, s, e);
            }
            Group::Protein => {
                let (s, e) = self.word(pick(rng, PROTEINS));
                self.entity(PROTEIN, s, e);
            }
            Group::Cell => {
                let (s, e) = self.word(pick(rng, FLAT_CELLS));
                self.entity(CELL, s, e);
            }
            Group::Dna => {
                let words = FLAT_DNA.choose(rng).expect("non-empty");
                let (s, _) = self.word(words[0]);
                let mut e = 0;
                for w in &words[1..] {
                    e = self.word(w).1;
                }
                self.entity(DNA, s, e);
            }
        }
    }
}

pub fn synthetic_queries() -> QuerySpec {
    QuerySpec(
        [
            (PROTEIN, "protein enzyme factor molecule subunit"),
            (DNA, "DNA gene promoter sequence region"),
            (CELL, "cell type lymphocyte population"),
        ]
        .into_iter()
        .map(|(t, q)| (t.to_string(), q.to_string()))
        .collect(),
    )
}

/// `n` sentences over three entity types. The first group of sentence `k`
/// cycles through all group shapes, so every nesting pattern occurs once
/// `n >= 6`; about half the sentences get a second random group.
pub fn synthetic_corpus(n: usize, seed: u64) -> Vec<DatasetSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|k| {
            let mut b = Builder::default();
            b.fillers(&mut rng, 1, 3);
            b.group(GROUPS[k % GROUPS.len()], &mut rng);
            b.fillers(&mut rng, 1, 3);
            if rng.gen_bool(0.5) {
                let g = *GROUPS.choose(&mut rng).expect("groups");
                b.group(g, &mut rng);
                b.fillers(&mut rng, 0, 2);
            }
            b.word(ENDINGS.choose(&mut rng).expect("endings"));
            b.text.push('.');
            DatasetSample {
                text: b.text,
                entities: b.entities,
            }
        })
        .collect()
}

/// Share of entity spans lying inside another span of the same sentence.
pub fn nesting_rate(samples: &[DatasetSample]) -> f64 {
    let mut total = 0usize;
    let mut nested = 0usize;
    for s in samples {
        for (a, x) in s.entities.iter().enumerate() {
            total += 1;
            let inside = s.entities.iter().enumerate().any(|(b, y)| {
                a != b && y.start <= x.start && x.end <= y.end && (y.start, y.end) != (x.start, x.end)
            });
            if inside {
                nested += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        nested as f64 / total as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_shape() {
        let c = synthetic_corpus(50, 7);
        assert_eq!(c.len(), 50);
        let q = synthetic_queries();
        let types: std::collections::BTreeSet<_> =
            c.iter().flat_map(|s| s.entities.iter().map(|e| e.entity_type.as_str())).collect();
        assert_eq!(types.len(), 3);
        assert!(types.iter().all(|t| q.query(t).is_some()));
        assert!(nesting_rate(&c) >= 0.2, "rate {}", nesting_rate(&c));
        for s in &c {
            s.validate().unwrap();
        }
    }

    #[test]
    fn same_type_shared_start_nesting_present() {
        let c = synthetic_corpus(50, 7);
        let found = c.iter().any(|s| {
            s.entities.iter().any(|x| {
                s.entities.iter().any(|y| {
                    x.entity_type == y.entity_type && x.start == y.start && x.end < y.end
                })
            })
        });
        assert!(found);
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(synthetic_corpus(20, 3), synthetic_corpus(20, 3));
        assert_ne!(synthetic_corpus(20, 3), synthetic_corpus(20, 4));
    }

    #[test]
    fn surfaces_match_offsets() {
        let c = synthetic_corpus(12, 1);
        let fam = &c[0];
        let spans: Vec<String> = fam.entities.iter().map(|e| fam.surface(e.start, e.end)).collect();
        assert!(spans[1].starts_with(&spans[0]));
        assert!(spans[1].contains(" alpha "));
    }
}
