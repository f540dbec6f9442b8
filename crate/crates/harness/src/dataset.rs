//! On-disk dataset format: JSON lines with integer token ids plus a binary
//! sidecar holding the visual grids.
//!
//! `<name>.jsonl` carries one record per sample (difficulty, text ids,
//! answer start, question spans, and the sample's index into the sidecar).
//! `<name>.grids.bin` starts with a one-line JSON header
//! `{"count":n,"height":h,"width":w}` followed by `n·h·w` little-endian
//! u32 cell token ids.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use vlsched_core::model::Sample;
use vlsched_core::{CoreError, Result};

use crate::synthetic::{cell_streams, Difficulty, SyntheticSample};
use crate::vocab::Vocab;

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    difficulty: Difficulty,
    text_ids: Vec<usize>,
    answer_start: usize,
    question_spans: Vec<(usize, usize)>,
    grid_index: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct GridHeader {
    count: usize,
    height: usize,
    width: usize,
}

pub fn dataset_paths(dir: &Path, name: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{name}.jsonl")), dir.join(format!("{name}.grids.bin")))
}

pub fn write_dataset(
    dir: &Path,
    name: &str,
    samples: &[SyntheticSample],
    grid_h: usize,
    grid_w: usize,
) -> Result<()> {
    let cells = grid_h * grid_w;
    let (jsonl_path, grids_path) = dataset_paths(dir, name);
    let mut jsonl = String::new();
    let mut grids: Vec<u8> = Vec::new();
    let header = GridHeader { count: samples.len(), height: grid_h, width: grid_w };
    grids.extend_from_slice(&serde_json::to_vec(&header)?);
    grids.push(b'\n');
    for (i, s) in samples.iter().enumerate() {
        if s.sample.visual_ids.len() != cells {
            return Err(CoreError::InvalidArgument(format!(
                "sample {i} has {} cells, expected {cells}",
                s.sample.visual_ids.len()
            )));
        }
        let record = Record {
            difficulty: s.difficulty,
            text_ids: s.sample.text_ids.clone(),
            answer_start: s.sample.answer_start,
            question_spans: s.sample.question_spans.clone(),
            grid_index: i,
        };
        jsonl.push_str(&serde_json::to_string(&record)?);
        jsonl.push('\n');
        for &cell in &s.sample.visual_ids {
            grids.extend_from_slice(&(cell as u32).to_le_bytes());
        }
    }
    std::fs::write(jsonl_path, jsonl)?;
    std::fs::write(grids_path, grids)?;
    Ok(())
}

/// Reads a dataset back; `vocab` re-derives the factored embedding streams
/// from the stored cell symbols.
pub fn read_dataset(dir: &Path, name: &str, vocab: &Vocab) -> Result<Vec<SyntheticSample>> {
    let (jsonl_path, grids_path) = dataset_paths(dir, name);
    let bytes = std::fs::read(&grids_path)?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| CoreError::InvalidArgument("grid sidecar has no header line".into()))?;
    let header: GridHeader = serde_json::from_slice(&bytes[..newline])?;
    let body = &bytes[newline + 1..];
    let cells = header.height * header.width;
    if body.len() != header.count * cells * 4 {
        return Err(CoreError::InvalidArgument(format!(
            "grid sidecar body has {} bytes, header implies {}",
            body.len(),
            header.count * cells * 4
        )));
    }
    let grids: Vec<Vec<usize>> = (0..header.count)
        .map(|i| {
            body[i * cells * 4..(i + 1) * cells * 4]
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
                .collect()
        })
        .collect();

    let text = std::fs::read_to_string(&jsonl_path)?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let record: Record = serde_json::from_str(line)?;
        let grid = grids.get(record.grid_index).ok_or_else(|| {
            CoreError::InvalidArgument(format!(
                "record references grid {} of {}",
                record.grid_index, header.count
            ))
        })?;
        let cells: Vec<Option<(usize, usize)>> = grid
            .iter()
            .map(|&tok| {
                if tok == crate::vocab::MARKER {
                    Ok(None)
                } else {
                    vocab
                        .cell_of_token(tok)
                        .map(Some)
                        .ok_or_else(|| {
                            CoreError::InvalidArgument(format!(
                                "token {tok} is not a cell symbol"
                            ))
                        })
                }
            })
            .collect::<Result<_>>()?;
        let (visual_ids, visual_extra) = cell_streams(vocab, &cells);
        out.push(SyntheticSample {
            difficulty: record.difficulty,
            sample: Sample {
                visual_ids,
                visual_extra,
                text_ids: record.text_ids,
                answer_start: record.answer_start,
                question_spans: record.question_spans,
            },
        });
    }
    Ok(out)
}
