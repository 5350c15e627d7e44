//! Linear per-token foreground head used to turn encoder embeddings into
//! instance masks for evaluation. This is a probe for comparing encoders,
//! not a segmentation decoder.

use anyhow::{bail, ensure, Result};
use evdistill::metrics::MaskSet;
use evdistill::numeric::Tensor;
use serde::{Deserialize, Serialize};

pub const HEAD_FILE: &str = "head.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskHead {
    /// Side of the token grid.
    pub grid: usize,
    pub patch: usize,
    /// `c` weights then the bias.
    pub weights: Vec<f64>,
}

/// Fraction of each patch covered by any instance, row-major over the grid.
pub fn patch_coverage(masks: &MaskSet, grid: usize, patch: usize) -> Result<Vec<f64>> {
    ensure!(
        masks.height == grid * patch && masks.width == grid * patch,
        "masks are {}x{}, expected {}x{}",
        masks.height,
        masks.width,
        grid * patch,
        grid * patch
    );
    let mut fg = vec![false; masks.height * masks.width];
    for m in &masks.masks {
        for (f, &c) in fg.iter_mut().zip(&m.cells) {
            *f |= c;
        }
    }
    let mut out = vec![0.0; grid * grid];
    for y in 0..masks.height {
        for x in 0..masks.width {
            if fg[y * masks.width + x] {
                out[(y / patch) * grid + x / patch] += 1.0;
            }
        }
    }
    let area = (patch * patch) as f64;
    Ok(out.into_iter().map(|v| v / area).collect())
}

/// Solves `a · x = b` for a dense square system by partial-pivot elimination.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty range");
        if a[piv][col].abs() < 1e-300 {
            bail!("singular system while fitting the mask head");
        }
        a.swap(col, piv);
        b.swap(col, piv);
        let (top, rest) = a.split_at_mut(col + 1);
        let pivot = &top[col];
        for (i, row) in rest.iter_mut().enumerate() {
            let f = row[col] / pivot[col];
            if f != 0.0 {
                for (x, p) in row[col..].iter_mut().zip(&pivot[col..]) {
                    *x -= f * p;
                }
                b[col + 1 + i] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Ok(x)
}

impl MaskHead {
    /// Ridge regression of patch coverage on `[embedding, 1]`.
    pub fn fit(samples: &[(&Tensor, &MaskSet)], grid: usize, patch: usize, ridge: f64) -> Result<Self> {
        ensure!(!samples.is_empty(), "no samples to fit the mask head on");
        ensure!(ridge >= 0.0, "ridge must be non-negative");
        let c = samples[0].0.cols();
        let n = c + 1;
        let mut xtx = vec![vec![0.0; n]; n];
        let mut xty = vec![0.0; n];
        let mut row = vec![1.0; n];
        for (emb, masks) in samples {
            ensure!(emb.dims() == [grid * grid, c], "embedding shape {:?}", emb.dims());
            let y = patch_coverage(masks, grid, patch)?;
            for (t, &target) in y.iter().enumerate() {
                row[..c].copy_from_slice(emb.row(t));
                for i in 0..n {
                    xty[i] += row[i] * target;
                    for j in 0..n {
                        xtx[i][j] += row[i] * row[j];
                    }
                }
            }
        }
        for (i, r) in xtx.iter_mut().enumerate().take(c) {
            r[i] += ridge;
        }
        Ok(Self {
            grid,
            patch,
            weights: solve(xtx, xty)?,
        })
    }

    pub fn scores(&self, emb: &Tensor) -> Result<Vec<f64>> {
        let c = self.weights.len() - 1;
        ensure!(emb.dims() == [self.grid * self.grid, c], "embedding shape {:?}", emb.dims());
        Ok((0..emb.rows())
            .map(|t| emb.row(t).iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>() + self.weights[c])
            .collect())
    }

    /// Thresholds the scores and splits foreground into 4-connected instances.
    pub fn predict(&self, emb: &Tensor, threshold: f64) -> Result<MaskSet> {
        let fg: Vec<bool> = self.scores(emb)?.into_iter().map(|s| s >= threshold).collect();
        let labels = components(&fg, self.grid);
        let side = self.grid * self.patch;
        let mut pixels = vec![0u32; side * side];
        for y in 0..side {
            for x in 0..side {
                pixels[y * side + x] = labels[(y / self.patch) * self.grid + x / self.patch];
            }
        }
        Ok(MaskSet::from_labels(side, side, &pixels)?)
    }
}

/// 4-connected labelling of a square grid, labels from 1 in scan order.
pub fn components(fg: &[bool], side: usize) -> Vec<u32> {
    let mut labels = vec![0u32; fg.len()];
    let mut next = 0;
    let mut stack = Vec::new();
    for start in 0..fg.len() {
        if !fg[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (y, x) = (i / side, i % side);
            let mut visit = |j: usize| {
                if fg[j] && labels[j] == 0 {
                    labels[j] = next;
                    stack.push(j);
                }
            };
            if y > 0 {
                visit(i - side);
            }
            if y + 1 < side {
                visit(i + side);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < side {
                visit(i + 1);
            }
        }
    }
    labels
}
