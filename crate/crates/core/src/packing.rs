//! Token packing: spatial interpolation plus space-to-depth, for arbitrary
//! reduction rates.
//!
//! To cut the visual token count by a factor `R` with a shuffle block `s`,
//! the patch grid is bilinearly resized so each axis lands on about
//! `axis · s / sqrt(R)` positions (snapped to whole blocks), then a
//! space-to-depth transform folds each `s x s` block into channels. The
//! resized axes are chosen jointly among the floor/ceil block counts so the
//! final token count stays as close to `H·W/R` as the integer lattice
//! allows. An optional linear projector maps the folded `s²·c` channels
//! back to `c`; without it the packed tokens keep the folded width.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::numkernel::Matrix;

/// Where in the vision pipeline a grid was captured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridProvenance {
    PreConnector,
    PostConnector,
}

/// A 2D spatial grid of feature vectors; `data` is indexed
/// `(row * width + col) * channels + ch`. Flattening to a token matrix and
/// back is exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenGrid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
    pub provenance: GridProvenance,
}

impl TokenGrid {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f64>,
        provenance: GridProvenance,
    ) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(CoreError::InvalidArgument(format!(
                "grid data length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(TokenGrid { height, width, channels, data, provenance })
    }

    pub fn constant(
        height: usize,
        width: usize,
        channels: usize,
        value: f64,
        provenance: GridProvenance,
    ) -> Self {
        TokenGrid { height, width, channels, data: vec![value; height * width * channels], provenance }
    }

    /// Reshapes a token matrix (rows = `height * width` tokens) back onto
    /// its 2D spatial grid.
    pub fn from_token_matrix(
        m: &Matrix,
        height: usize,
        width: usize,
        provenance: GridProvenance,
    ) -> Result<Self> {
        if m.rows() != height * width {
            return Err(CoreError::InvalidArgument(format!(
                "{} tokens do not unflatten to a {height}x{width} grid",
                m.rows()
            )));
        }
        Ok(TokenGrid {
            height,
            width,
            channels: m.cols(),
            data: m.data().to_vec(),
            provenance,
        })
    }

    /// Flattens row-major into a token matrix of `height * width` rows.
    pub fn to_token_matrix(&self) -> Matrix {
        Matrix::from_vec(self.height * self.width, self.channels, self.data.clone())
            .expect("consistent dims")
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    #[inline]
    fn at_mut(&mut self, row: usize, col: usize, ch: usize) -> &mut f64 {
        &mut self.data[(row * self.width + col) * self.channels + ch]
    }

    pub fn token_count(&self) -> usize {
        self.height * self.width
    }
}

/// Bilinear resize with half-pixel centers. Same-size output copies the
/// input exactly, and interpolation is written as `a + t·(b − a)` so
/// constant grids are preserved bit-exactly.
pub fn bilinear_resize(grid: &TokenGrid, out_h: usize, out_w: usize) -> Result<TokenGrid> {
    if grid.height == 0 || grid.width == 0 || out_h == 0 || out_w == 0 {
        return Err(CoreError::InvalidArgument("resize axes must be positive".into()));
    }
    let mut out =
        TokenGrid::constant(out_h, out_w, grid.channels, 0.0, grid.provenance);
    let src_coord = |dst: usize, out_len: usize, in_len: usize| -> (usize, usize, f64) {
        let scale = in_len as f64 / out_len as f64;
        let x = (dst as f64 + 0.5) * scale - 0.5;
        let x = x.clamp(0.0, (in_len - 1) as f64);
        let lo = x.floor() as usize;
        let hi = (lo + 1).min(in_len - 1);
        (lo, hi, x - lo as f64)
    };
    for r in 0..out_h {
        let (r0, r1, fr) = src_coord(r, out_h, grid.height);
        for c in 0..out_w {
            let (c0, c1, fc) = src_coord(c, out_w, grid.width);
            for ch in 0..grid.channels {
                let top = {
                    let a = grid.at(r0, c0, ch);
                    a + fc * (grid.at(r0, c1, ch) - a)
                };
                let bottom = {
                    let a = grid.at(r1, c0, ch);
                    a + fc * (grid.at(r1, c1, ch) - a)
                };
                *out.at_mut(r, c, ch) = top + fr * (bottom - top);
            }
        }
    }
    Ok(out)
}

/// Folds each `s x s` spatial block into the channel dimension:
/// `(H, W, c) -> (H/s, W/s, s²·c)`. Block cell `(dr, dc)` lands at channel
/// offset `(dr·s + dc)·c`. A pure index shuffle, bijective on values.
pub fn space_to_depth(grid: &TokenGrid, s: usize) -> Result<TokenGrid> {
    if s == 0 {
        return Err(CoreError::InvalidArgument("block size must be positive".into()));
    }
    if grid.height % s != 0 || grid.width % s != 0 {
        return Err(CoreError::InvalidArgument(format!(
            "grid {}x{} is not divisible into {s}x{s} blocks",
            grid.height, grid.width
        )));
    }
    let (oh, ow, oc) = (grid.height / s, grid.width / s, grid.channels * s * s);
    let mut out = TokenGrid::constant(oh, ow, oc, 0.0, grid.provenance);
    for r in 0..oh {
        for c in 0..ow {
            for dr in 0..s {
                for dc in 0..s {
                    for ch in 0..grid.channels {
                        let v = grid.at(r * s + dr, c * s + dc, ch);
                        *out.at_mut(r, c, (dr * s + dc) * grid.channels + ch) = v;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`space_to_depth`]: `(H, W, s²·c) -> (H·s, W·s, c)`.
pub fn depth_to_space(grid: &TokenGrid, s: usize) -> Result<TokenGrid> {
    if s == 0 {
        return Err(CoreError::InvalidArgument("block size must be positive".into()));
    }
    if grid.channels % (s * s) != 0 {
        return Err(CoreError::InvalidArgument(format!(
            "channel count {} is not divisible by {s}²",
            grid.channels
        )));
    }
    let c = grid.channels / (s * s);
    let (oh, ow) = (grid.height * s, grid.width * s);
    let mut out = TokenGrid::constant(oh, ow, c, 0.0, grid.provenance);
    for r in 0..grid.height {
        for col in 0..grid.width {
            for dr in 0..s {
                for dc in 0..s {
                    for ch in 0..c {
                        let v = grid.at(r, col, (dr * s + dc) * c + ch);
                        *out.at_mut(r * s + dr, col * s + dc, ch) = v;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// A projector averaging the `s²` folded copies of each channel, mapping
/// `s²·c -> c`. Useful as a parameter-free packing variant and in tests.
pub fn averaging_projector(s: usize, channels: usize) -> Matrix {
    let mut m = Matrix::zeros(s * s * channels, channels);
    let w = 1.0 / (s * s) as f64;
    for copy in 0..s * s {
        for ch in 0..channels {
            m.set(copy * channels + ch, ch, w);
        }
    }
    m
}

/// Joint per-axis block counts whose product lands closest to the target
/// token count `H·W/R`. Candidates are the floor/ceil of `axis / sqrt(R) /
/// s` blocks per axis; ties prefer the smaller grid, then the smaller
/// height.
fn choose_block_counts(h: usize, w: usize, reduction: f64) -> (usize, usize) {
    // Resizing an axis by s/sqrt(R) and then folding s positions per block
    // leaves about axis/sqrt(R) blocks along it.
    let target_tokens = h as f64 * w as f64 / reduction;
    let t_h = h as f64 / reduction.sqrt();
    let t_w = w as f64 / reduction.sqrt();
    let options = |t: f64| -> [usize; 2] {
        let lo = t.floor().max(1.0) as usize;
        [lo, lo + 1]
    };
    let mut best: Option<(f64, usize, usize, usize)> = None;
    for &hb in options(t_h).iter() {
        for &wb in options(t_w).iter() {
            let tokens = hb * wb;
            let err = (tokens as f64 - target_tokens).abs();
            let key = (err, tokens, hb, wb);
            best = Some(match best {
                None => key,
                Some(b) => {
                    if (key.0, key.1, key.2) < (b.0, b.1, b.2) {
                        key
                    } else {
                        b
                    }
                }
            });
        }
    }
    let (_, _, hb, wb) = best.expect("candidates exist");
    (hb, wb)
}

/// Packs a grid by a reduction factor `R >= 1` with shuffle block `s`:
/// resize each axis by about `s / sqrt(R)`, space-to-depth with block `s`,
/// then optionally project the folded channels back down. Returns the
/// packed token matrix (rows = packed tokens).
pub fn pack_tokens(
    grid: &TokenGrid,
    reduction: f64,
    s: usize,
    projector: Option<&Matrix>,
) -> Result<Matrix> {
    if !(reduction >= 1.0) || !reduction.is_finite() {
        return Err(CoreError::InvalidArgument(format!(
            "reduction must be a finite factor >= 1, got {reduction}"
        )));
    }
    if s == 0 {
        return Err(CoreError::InvalidArgument("block size must be positive".into()));
    }
    if grid.height == 0 || grid.width == 0 {
        return Err(CoreError::InvalidArgument("cannot pack an empty grid".into()));
    }
    let (hb, wb) = choose_block_counts(grid.height, grid.width, reduction);
    let (target_h, target_w) = (hb * s, wb * s);
    let resized = if (target_h, target_w) == (grid.height, grid.width) {
        grid.clone()
    } else {
        bilinear_resize(grid, target_h, target_w)?
    };
    let folded = space_to_depth(&resized, s)?;
    let tokens = folded.to_token_matrix();
    match projector {
        Some(p) => {
            if p.rows() != folded.channels {
                return Err(CoreError::InvalidArgument(format!(
                    "projector expects {} input channels, folded grid has {}",
                    p.rows(),
                    folded.channels
                )));
            }
            crate::numkernel::matmul(&tokens, p)
        }
        None => Ok(tokens),
    }
}

/// Writes a grid as a one-line JSON shape header followed by the raw f64
/// little-endian values.
pub fn write_grid(path: &std::path::Path, grid: &TokenGrid) -> Result<()> {
    #[derive(Serialize)]
    struct Header<'a> {
        height: usize,
        width: usize,
        channels: usize,
        provenance: &'a GridProvenance,
    }
    let mut bytes = serde_json::to_vec(&Header {
        height: grid.height,
        width: grid.width,
        channels: grid.channels,
        provenance: &grid.provenance,
    })?;
    bytes.push(b'\n');
    for v in &grid.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read_grid(path: &std::path::Path) -> Result<TokenGrid> {
    #[derive(Deserialize)]
    struct Header {
        height: usize,
        width: usize,
        channels: usize,
        provenance: GridProvenance,
    }
    let bytes = std::fs::read(path)?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| CoreError::InvalidArgument("grid file has no header line".into()))?;
    let header: Header = serde_json::from_slice(&bytes[..newline])?;
    let body = &bytes[newline + 1..];
    let expected = header.height * header.width * header.channels * 8;
    if body.len() != expected {
        return Err(CoreError::InvalidArgument(format!(
            "grid body has {} bytes, header implies {expected}",
            body.len()
        )));
    }
    let data: Vec<f64> =
        body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    TokenGrid::new(header.height, header.width, header.channels, data, header.provenance)
}
