//! Procedural task generation over a cell grid.
//!
//! Two difficulty regimes share one cell vocabulary of (key, class) pair
//! symbols, embedded as the sum of pair + key + class token rows:
//!
//! - **coarse** — a majority of cells carry one class; the question asks
//!   for that class. Answerable from the global content statistics of the
//!   static visual tokens, which one uniform cross-attention read exposes.
//! - **fine** — one cell is a unique marker; the answer is the plurality
//!   class among the cells *before* the marker in reading order. The
//!   non-marker cells carry a fixed class multiset (every class equally
//!   often), so the global content statistics are identical across samples
//!   and only the arrangement determines the answer. Static content reads
//!   cannot resolve it, while causal self-attention among visual tokens
//!   lets the marker absorb its prefix's class histogram.
//!
//! Construction guarantees answers are unique (prefix plurality wins by a
//! margin of at least two) and checkable by the independent grid
//! interpreter below.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use vlsched_core::model::Sample;
use vlsched_core::{CoreError, Result};

use crate::vocab::{Vocab, ASK, MARKER, PAD, TASK_COARSE, TASK_FINE};

/// The marker never sits closer than this to either end of the flattened
/// grid, so the zero-padding signature of the positional convolution cannot
/// anchor it (or its prefix) from static content alone.
pub const MARKER_EDGE_MARGIN: usize = 10;

/// The prefix plurality class must beat the runner-up by at least this many
/// cells in the counted region.
pub const PLURALITY_MARGIN: usize = 2;

/// Prefix cells the positional convolution makes readable from static
/// content — the first cells of the sequence (zero-padding signature) and
/// the cells inside the marker's kernel window — are excluded from the
/// counted tally. With them uncounted, a static content read learns almost
/// nothing about the answer.
pub const PREFIX_EXCLUDE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Coarse,
    Fine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Coarse,
    Fine,
    Mixture,
}

/// Shape and content parameters of the synthetic tasks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub grid_h: usize,
    pub grid_w: usize,
    pub keys: usize,
    pub classes: usize,
    /// Fraction of cells carrying the majority class in coarse samples.
    pub majority_fraction: f64,
}

impl TaskSpec {
    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::new(self.keys, self.classes)
    }

    pub fn cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    fn validate(&self, kind: TaskKind) -> Result<()> {
        if self.grid_h == 0 || self.grid_w == 0 {
            return Err(CoreError::InvalidArgument("grid axes must be positive".into()));
        }
        if self.classes < 2 {
            return Err(CoreError::InvalidArgument("need at least two classes".into()));
        }
        if !(0.5..1.0).contains(&self.majority_fraction) {
            return Err(CoreError::InvalidArgument(
                "majority_fraction must be in [0.5, 1)".into(),
            ));
        }
        let fine_needed = matches!(kind, TaskKind::Fine | TaskKind::Mixture);
        if fine_needed {
            if (self.cells() - 1) % self.classes != 0 {
                return Err(CoreError::InvalidArgument(format!(
                    "fine task needs classes to divide cells-1 ({} cells, {} classes)",
                    self.cells(),
                    self.classes
                )));
            }
            if self.cells() < 2 * MARKER_EDGE_MARGIN + 2 {
                return Err(CoreError::InvalidArgument(format!(
                    "fine task needs at least {} cells",
                    2 * MARKER_EDGE_MARGIN + 2
                )));
            }
        }
        Ok(())
    }
}

/// One generated sample: token-level sample plus its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSample {
    pub difficulty: Difficulty,
    pub sample: Sample,
}

/// Deterministic dataset generation. Mixture alternates coarse and fine.
pub fn gen_synthetic(
    spec: &TaskSpec,
    kind: TaskKind,
    n: usize,
    seed: u64,
) -> Result<Vec<SyntheticSample>> {
    if n == 0 {
        return Err(CoreError::InvalidArgument("need at least one sample".into()));
    }
    spec.validate(kind)?;
    let vocab = spec.vocab()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let difficulty = match kind {
            TaskKind::Coarse => Difficulty::Coarse,
            TaskKind::Fine => Difficulty::Fine,
            TaskKind::Mixture => {
                if i % 2 == 0 {
                    Difficulty::Coarse
                } else {
                    Difficulty::Fine
                }
            }
        };
        let sample = match difficulty {
            Difficulty::Coarse => gen_coarse(spec, &vocab, &mut rng),
            Difficulty::Fine => gen_fine(spec, &vocab, &mut rng),
        };
        out.push(SyntheticSample { difficulty, sample });
    }
    Ok(out)
}

/// Factored cell embedding streams: each cell contributes its pair-symbol
/// token plus its key and class attribute tokens, all summed by the
/// embedder. The attribute components share rows with the question and
/// answer tokens, which keeps content-addressed reads learnable at toy
/// scale. Marker cells (`None`) embed as MARKER plus two PAD rows.
pub fn cell_streams(
    vocab: &Vocab,
    cells: &[Option<(usize, usize)>],
) -> (Vec<usize>, Vec<Vec<usize>>) {
    let visual_ids: Vec<usize> = cells
        .iter()
        .map(|cell| match cell {
            Some((k, c)) => vocab.cell_token(*k, *c),
            None => MARKER,
        })
        .collect();
    let key_stream: Vec<usize> = cells
        .iter()
        .map(|cell| match cell {
            Some((k, _)) => vocab.key_token(*k),
            None => PAD,
        })
        .collect();
    let class_stream: Vec<usize> = cells
        .iter()
        .map(|cell| match cell {
            Some((_, c)) => vocab.class_token(*c),
            None => PAD,
        })
        .collect();
    (visual_ids, vec![key_stream, class_stream])
}

fn gen_coarse(spec: &TaskSpec, vocab: &Vocab, rng: &mut ChaCha8Rng) -> Sample {
    let cells = spec.cells();
    let majority_class = rng.gen_range(0..spec.classes);
    let majority_count = ((cells as f64) * spec.majority_fraction).ceil() as usize;
    let mut classes = Vec::with_capacity(cells);
    for _ in 0..majority_count {
        classes.push(majority_class);
    }
    // Minority cells avoid the majority class so the plurality stays
    // unambiguous even at small grids.
    while classes.len() < cells {
        let c = rng.gen_range(0..spec.classes - 1);
        classes.push(if c >= majority_class { c + 1 } else { c });
    }
    classes.shuffle(rng);
    let grid: Vec<Option<(usize, usize)>> =
        classes.iter().map(|&c| Some((rng.gen_range(0..spec.keys), c))).collect();
    let text_ids = vec![TASK_COARSE, ASK, vocab.class_token(majority_class)];
    let (visual_ids, visual_extra) = cell_streams(vocab, &grid);
    Sample { visual_ids, visual_extra, text_ids, answer_start: 2, question_spans: vec![(0, 2)] }
}

fn gen_fine(spec: &TaskSpec, vocab: &Vocab, rng: &mut ChaCha8Rng) -> Sample {
    let cells = spec.cells();
    let per_class = (cells - 1) / spec.classes;
    loop {
        // Fixed class multiset: every class exactly (cells-1)/classes times.
        let mut classes: Vec<usize> = (0..cells - 1).map(|i| i % spec.classes).collect();
        classes.shuffle(rng);
        debug_assert_eq!(classes.iter().filter(|&&c| c == 0).count(), per_class);
        let marker_at = rng.gen_range(MARKER_EDGE_MARGIN..=cells - 1 - MARKER_EDGE_MARGIN);

        // Counted region: the prefix minus its convolution-readable rims.
        let counted = &classes[PREFIX_EXCLUDE..marker_at - PREFIX_EXCLUDE];
        let mut counts = vec![0usize; spec.classes];
        for &c in counted {
            counts[c] += 1;
        }
        let mut order: Vec<usize> = (0..spec.classes).collect();
        order.sort_by_key(|&c| std::cmp::Reverse(counts[c]));
        if counts[order[0]] < counts[order[1]] + PLURALITY_MARGIN {
            continue;
        }
        let answer_class = order[0];

        // The full prefix must agree, so the causal-attention mechanism
        // (which absorbs every cell before the marker) sees the same
        // plurality the counted tally defines.
        let mut full = vec![0usize; spec.classes];
        for &c in &classes[..marker_at] {
            full[c] += 1;
        }
        if full.iter().enumerate().any(|(c, &n)| c != answer_class && n >= full[answer_class]) {
            continue;
        }

        let mut grid: Vec<Option<(usize, usize)>> = Vec::with_capacity(cells);
        for (i, &c) in classes.iter().enumerate() {
            if i == marker_at {
                grid.push(None);
            }
            grid.push(Some((rng.gen_range(0..spec.keys), c)));
        }
        if grid.len() < cells {
            grid.push(None);
        }
        let text_ids = vec![TASK_FINE, ASK, vocab.class_token(answer_class)];
        let (visual_ids, visual_extra) = cell_streams(vocab, &grid);
        return Sample {
            visual_ids,
            visual_extra,
            text_ids,
            answer_start: 2,
            question_spans: vec![(0, 2)],
        };
    }
}

/// Independent interpreter: recomputes the answer for a (grid, question)
/// pair straight from the token layout. Used as the label-correctness
/// oracle in tests and never by the generator.
pub fn interpret_question(
    vocab: &Vocab,
    visual_ids: &[usize],
    question: &[usize],
) -> Result<usize> {
    let task = *question
        .first()
        .ok_or_else(|| CoreError::InvalidArgument("empty question".into()))?;
    match task {
        t if t == TASK_COARSE => {
            let mut counts = vec![0usize; vocab.classes];
            for &cell in visual_ids {
                let (_, class) = vocab
                    .cell_of_token(cell)
                    .ok_or_else(|| CoreError::InvalidArgument("non-cell token in grid".into()))?;
                counts[class] += 1;
            }
            unique_plurality(vocab, &counts, 1)
        }
        t if t == TASK_FINE => {
            let marker = visual_ids
                .iter()
                .position(|&t| t == MARKER)
                .ok_or_else(|| CoreError::InvalidArgument("fine grid has no marker".into()))?;
            if marker < 2 * PREFIX_EXCLUDE {
                return Err(CoreError::InvalidArgument("marker too close to the start".into()));
            }
            let mut counts = vec![0usize; vocab.classes];
            for &cell in &visual_ids[PREFIX_EXCLUDE..marker - PREFIX_EXCLUDE] {
                let (_, class) = vocab
                    .cell_of_token(cell)
                    .ok_or_else(|| CoreError::InvalidArgument("non-cell token in grid".into()))?;
                counts[class] += 1;
            }
            unique_plurality(vocab, &counts, 1)
        }
        other => Err(CoreError::InvalidArgument(format!("unknown task token {other}"))),
    }
}

fn unique_plurality(vocab: &Vocab, counts: &[usize], margin: usize) -> Result<usize> {
    let best = counts.iter().enumerate().max_by_key(|(_, &n)| n).expect("classes > 0").0;
    let runner_up = counts
        .iter()
        .enumerate()
        .filter(|(c, _)| *c != best)
        .map(|(_, &n)| n)
        .max()
        .unwrap_or(0);
    if counts[best] < runner_up + margin {
        return Err(CoreError::InvalidArgument("ambiguous plurality class".into()));
    }
    Ok(vocab.class_token(best))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> TaskSpec {
        // 36 cells: 35 class cells over 5 classes plus the marker.
        TaskSpec { grid_h: 6, grid_w: 6, keys: 7, classes: 5, majority_fraction: 0.7 }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_synthetic(&spec(), TaskKind::Mixture, 20, 5).unwrap();
        let b = gen_synthetic(&spec(), TaskKind::Mixture, 20, 5).unwrap();
        assert_eq!(a, b);
        let c = gen_synthetic(&spec(), TaskKind::Mixture, 20, 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn labels_match_independent_interpreter() {
        let vocab = spec().vocab().unwrap();
        for kind in [TaskKind::Coarse, TaskKind::Fine] {
            let data = gen_synthetic(&spec(), kind, 50, 11).unwrap();
            for s in &data {
                let question = s.sample.prompt();
                let want = interpret_question(&vocab, &s.sample.visual_ids, question).unwrap();
                assert_eq!(s.sample.answer(), &[want]);
            }
        }
    }

    #[test]
    fn coarse_majority_is_what_was_planted() {
        // A grid that is 75% one class answers that class.
        let spec =
            TaskSpec { grid_h: 4, grid_w: 4, keys: 2, classes: 4, majority_fraction: 0.75 };
        let vocab = spec.vocab().unwrap();
        let data = gen_synthetic(&spec, TaskKind::Coarse, 30, 3).unwrap();
        for s in &data {
            let answer_class = vocab.class_of_token(s.sample.answer()[0]).unwrap();
            let count = s
                .sample
                .visual_ids
                .iter()
                .filter(|&&cell| vocab.cell_of_token(cell).map(|(_, c)| c) == Some(answer_class))
                .count();
            assert!(count >= 12, "majority class appears only {count} times");
        }
    }

    #[test]
    fn fine_grids_have_balanced_content_and_interior_marker() {
        let spec = spec();
        let vocab = spec.vocab().unwrap();
        let data = gen_synthetic(&spec, TaskKind::Fine, 40, 17).unwrap();
        for s in &data {
            let marker = s.sample.visual_ids.iter().position(|&t| t == MARKER).unwrap();
            assert!(
                (MARKER_EDGE_MARGIN..=spec.cells() - 1 - MARKER_EDGE_MARGIN).contains(&marker),
                "marker at {marker}"
            );
            // Class histogram is the same in every sample.
            let mut counts = vec![0usize; spec.classes];
            for &cell in &s.sample.visual_ids {
                if let Some((_, c)) = vocab.cell_of_token(cell) {
                    counts[c] += 1;
                }
            }
            assert!(counts.iter().all(|&n| n == 7), "unbalanced {counts:?}");

            // Counted-region plurality wins by the construction margin, and
            // the full prefix agrees.
            let answer = vocab.class_of_token(s.sample.answer()[0]).unwrap();
            let mut counted = vec![0usize; spec.classes];
            for &cell in &s.sample.visual_ids[PREFIX_EXCLUDE..marker - PREFIX_EXCLUDE] {
                if let Some((_, c)) = vocab.cell_of_token(cell) {
                    counted[c] += 1;
                }
            }
            for (c, &n) in counted.iter().enumerate() {
                if c != answer {
                    assert!(counted[answer] >= n + PLURALITY_MARGIN);
                }
            }
            let mut full = vec![0usize; spec.classes];
            for &cell in &s.sample.visual_ids[..marker] {
                if let Some((_, c)) = vocab.cell_of_token(cell) {
                    full[c] += 1;
                }
            }
            for (c, &n) in full.iter().enumerate() {
                if c != answer {
                    assert!(full[answer] > n);
                }
            }
        }
    }

    #[test]
    fn fine_embedding_streams_are_factored() {
        let spec = spec();
        let vocab = spec.vocab().unwrap();
        let data = gen_synthetic(&spec, TaskKind::Fine, 5, 2).unwrap();
        for s in &data {
            assert_eq!(s.sample.visual_extra.len(), 2);
            for (i, &cell) in s.sample.visual_ids.iter().enumerate() {
                match vocab.cell_of_token(cell) {
                    Some((k, c)) => {
                        assert_eq!(s.sample.visual_extra[0][i], vocab.key_token(k));
                        assert_eq!(s.sample.visual_extra[1][i], vocab.class_token(c));
                    }
                    None => {
                        assert_eq!(cell, MARKER);
                        assert_eq!(s.sample.visual_extra[0][i], PAD);
                        assert_eq!(s.sample.visual_extra[1][i], PAD);
                    }
                }
            }
        }
    }

    #[test]
    fn mixture_interleaves_tags() {
        let data = gen_synthetic(&spec(), TaskKind::Mixture, 6, 2).unwrap();
        let tags: Vec<Difficulty> = data.iter().map(|s| s.difficulty).collect();
        assert_eq!(
            tags,
            vec![
                Difficulty::Coarse,
                Difficulty::Fine,
                Difficulty::Coarse,
                Difficulty::Fine,
                Difficulty::Coarse,
                Difficulty::Fine
            ]
        );
    }

    #[test]
    fn fine_requires_divisible_class_count() {
        let bad = TaskSpec { grid_h: 6, grid_w: 6, keys: 6, classes: 6, majority_fraction: 0.7 };
        assert!(gen_synthetic(&bad, TaskKind::Fine, 1, 0).is_err());
        assert!(gen_synthetic(&bad, TaskKind::Coarse, 1, 0).is_ok());
    }
}
