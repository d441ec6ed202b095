//! 8-bit PGM dumps of attention matrices before and after pruning.
//!
//! For block `b`, head `h` three `N×N` images are written:
//! `block{b}_head{h}_attn.pgm` (unpruned softmax attention),
//! `block{b}_head{h}_pruned.pgm` (renormalized attention, zero rows for
//! pruned queries) and `block{b}_head{h}_mask.pgm` (kept dependencies).
//! Each matrix is scaled linearly by its own maximum; scales, row-sum ranges
//! and kept query indices go to `dump.txt`.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{invalid, Error, Result};
use crate::model::{ForwardOptions, Model};
use crate::tensor::Tensor;

/// Writes a rank-2 matrix as binary PGM scaled so its maximum maps to 255.
/// Returns the scale (the value mapped to 255; 1 for an all-zero matrix).
pub fn write_pgm(path: &Path, m: &Tensor) -> Result<f64> {
    if m.rank() != 2 {
        return Err(invalid(format!("PGM needs a matrix, got {:?}", m.shape())));
    }
    let (rows, cols) = (m.shape()[0], m.shape()[1]);
    let max = m.data().iter().copied().fold(0.0f64, f64::max);
    let scale = if max > 0.0 { max } else { 1.0 };
    let mut bytes = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    bytes.extend(m.data().iter().map(|&v| (v.max(0.0) / scale * 255.0).round().min(255.0) as u8));
    fs::File::create(path)?.write_all(&bytes)?;
    Ok(scale)
}

/// Reads a binary PGM written by [`write_pgm`]: `(width, height, pixels)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let bad = || Error::Format(format!("{}: not a P5 PGM", path.display()));
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?.to_string());
    }
    pos += 1;
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad());
    if fields[0] != "P5" || num(&fields[3])? != 255 {
        return Err(bad());
    }
    let (w, h) = (num(&fields[1])?, num(&fields[2])?);
    let pixels = bytes.get(pos..pos + w * h).ok_or_else(bad)?.to_vec();
    Ok((w, h, pixels))
}

fn row_sum_range(m: &Tensor, rows: &[usize]) -> (f64, f64) {
    let n = m.shape()[1];
    rows.iter()
        .map(|&r| m.data()[r * n..(r + 1) * n].iter().sum::<f64>())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| (lo.min(s), hi.max(s)))
}

/// Writes the dumps for one image with pruning active and returns the PGM
/// paths in block, head order.
pub fn dump_attention(model: &Model, image: &Tensor, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let (_, diag) = model.forward(image, ForwardOptions::default())?;
    let mut files = Vec::new();
    let mut meta = String::new();
    for (b, block) in diag.blocks.iter().enumerate() {
        let raw = model.full_attention(b, &block.input)?;
        let dec = &block.decision;
        let n = dec.n;
        let kept = &dec.kept_indices;
        let _ = writeln!(meta, "block{b}.kept = {}", kept.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(","));
        for (h, a) in raw.iter().enumerate() {
            let rows = block.renormalized[h].as_ref().unwrap_or(&block.attention[h]);
            let mut post = Tensor::zeros([n, n]);
            let mut mask = Tensor::zeros([n, n]);
            for (r, &q) in kept.iter().enumerate() {
                post.data_mut()[q * n..(q + 1) * n].copy_from_slice(&rows.data()[r * n..(r + 1) * n]);
                mask.data_mut()[q * n..(q + 1) * n].copy_from_slice(&dec.masks[h].data()[r * n..(r + 1) * n]);
            }
            let stem = format!("block{b}_head{h}");
            let mut write = |suffix: &str, m: &Tensor| -> Result<f64> {
                let path = out_dir.join(format!("{stem}_{suffix}.pgm"));
                let s = write_pgm(&path, m)?;
                files.push(path);
                Ok(s)
            };
            let s_a = write("attn", a)?;
            let s_p = write("pruned", &post)?;
            let s_m = write("mask", &mask)?;
            let all: Vec<usize> = (0..n).collect();
            let (a_lo, a_hi) = row_sum_range(a, &all);
            let (p_lo, p_hi) = row_sum_range(&post, kept);
            let _ = writeln!(meta, "{stem}.attn.scale = {s_a:e}");
            let _ = writeln!(meta, "{stem}.attn.row_sum = {a_lo} {a_hi}");
            let _ = writeln!(meta, "{stem}.pruned.scale = {s_p:e}");
            let _ = writeln!(meta, "{stem}.pruned.row_sum = {p_lo} {p_hi}");
            let _ = writeln!(meta, "{stem}.mask.scale = {s_m:e}");
        }
    }
    fs::write(out_dir.join("dump.txt"), meta)?;
    Ok(files)
}
