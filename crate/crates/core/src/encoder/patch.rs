use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};
use crate::specgen::Spectrogram;

/// Non-overlapping `P x P` patches in time-major order. Patch `i` covers
/// grid cell `(i / cols, i % cols)`; inside a patch the values run over
/// time first, then frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub patch: usize,
    pub rows: usize,
    pub cols: usize,
    /// `N x P²` row-major.
    pub patches: Vec<f32>,
}

impl PatchGrid {
    pub fn n_tokens(&self) -> usize {
        self.rows * self.cols
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch
    }

    pub fn token(&self, i: usize) -> &[f32] {
        let l = self.patch_len();
        &self.patches[i * l..(i + 1) * l]
    }
}

pub fn patchify_raw(data: &[f32], frames: usize, bins: usize, patch: usize) -> Result<PatchGrid> {
    if patch == 0 || frames % patch != 0 || bins % patch != 0 {
        return Err(Error::shape(format!("{frames}x{bins} is not divisible into {patch}x{patch} patches")));
    }
    if data.len() != frames * bins {
        return Err(Error::shape(format!("{} values for a {frames}x{bins} grid", data.len())));
    }
    let (rows, cols) = (frames / patch, bins / patch);
    let mut patches = Vec::with_capacity(data.len());
    for r in 0..rows {
        for c in 0..cols {
            for a in 0..patch {
                let t = r * patch + a;
                patches.extend_from_slice(&data[t * bins + c * patch..t * bins + (c + 1) * patch]);
            }
        }
    }
    Ok(PatchGrid {
        patch,
        rows,
        cols,
        patches,
    })
}

pub fn patchify(s: &Spectrogram, patch: usize) -> Result<PatchGrid> {
    if s.channels != 1 {
        return Err(Error::shape(format!("expected one channel, got {}", s.channels)));
    }
    patchify_raw(&s.data, s.frames, s.bins, patch)
}

/// Inverse of [`patchify`]: the `T x K` row-major grid.
pub fn unpatchify(grid: &PatchGrid) -> Vec<f32> {
    let p = grid.patch;
    let bins = grid.cols * p;
    let mut out = vec![0.0; grid.patches.len()];
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let tok = grid.token(r * grid.cols + c);
            for a in 0..p {
                let t = r * p + a;
                out[t * bins + c * p..t * bins + (c + 1) * p].copy_from_slice(&tok[a * p..(a + 1) * p]);
            }
        }
    }
    out
}

/// Stacked patch matrix `[B*N, P²]` for a batch of equally sized spectrograms.
pub fn patchify_batch<T: Real>(specs: &[&Spectrogram], patch: usize) -> Result<Tensor<T>> {
    let mut data = Vec::new();
    let mut n = None;
    for s in specs {
        let g = patchify(s, patch)?;
        if *n.get_or_insert(g.n_tokens()) != g.n_tokens() {
            return Err(Error::shape("spectrograms in a batch differ in size"));
        }
        data.extend(g.patches.iter().map(|&v| T::c(v as f64)));
    }
    Tensor::new(vec![specs.len() * n.unwrap_or(0), patch * patch], data)
}
