use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::TrafficDataset;
use crate::autograd::Tensor;
use crate::error::{Error, Result};

/// Per-road channels and targets over one contiguous time range.
///
/// All series are indexed relative to `steps.start`.
#[derive(Clone, Debug)]
pub struct WindowSource {
    pub steps: Range<usize>,
    /// `channels[c][n]` is channel `c` of road `n`.
    pub channels: Vec<Vec<Vec<f64>>>,
    pub targets: Vec<Vec<f64>>,
    pub target_mask: Vec<Vec<bool>>,
}

impl WindowSource {
    /// Raw speeds of `sensors` over `steps` as a single channel.
    pub fn raw(ds: &TrafficDataset, sensors: &[usize], steps: Range<usize>) -> Self {
        let series: Vec<Vec<f64>> = sensors.iter().map(|&s| ds.row(s)[steps.clone()].to_vec()).collect();
        let mask = sensors.iter().map(|&s| ds.observed_row(s)[steps.clone()].to_vec()).collect();
        Self { steps, channels: vec![series.clone()], targets: series, target_mask: mask }
    }

    pub fn num_roads(&self) -> usize {
        self.targets.len()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// One batch of input windows and their multi-horizon targets.
#[derive(Clone, Debug)]
pub struct WindowBatch {
    /// `B × N × L × C`.
    pub inputs: Tensor,
    /// `B × N × F`; entry `[b, n, h]` is step `start + L + h`.
    pub targets: Tensor,
    pub target_mask: Vec<bool>,
    /// Absolute index of each window's first input step.
    pub window_start_indices: Vec<usize>,
}

impl WindowBatch {
    pub fn batch_size(&self) -> usize {
        self.window_start_indices.len()
    }
}

/// Windows of `input_len + horizon` steps that fit in `len` steps.
pub fn window_count(len: usize, input_len: usize, horizon: usize) -> usize {
    (len + 1).saturating_sub(input_len + horizon)
}

/// Iterates over batches of every window in `source`, shuffled when a seed
/// is given.
pub fn window_iter(
    source: &WindowSource,
    input_len: usize,
    horizon: usize,
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Result<WindowIter<'_>> {
    if input_len == 0 || horizon == 0 || batch_size == 0 {
        return Err(Error::invalid("input length, horizon and batch size must be positive"));
    }
    let count = window_count(source.len(), input_len, horizon);
    if count == 0 {
        return Err(Error::invalid(format!(
            "time range of {} steps is shorter than input {input_len} + horizon {horizon}",
            source.len()
        )));
    }
    let mut starts: Vec<usize> = (0..count).collect();
    if let Some(seed) = shuffle_seed {
        starts.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(WindowIter { source, starts, pos: 0, input_len, horizon, batch_size })
}

pub struct WindowIter<'a> {
    source: &'a WindowSource,
    starts: Vec<usize>,
    pos: usize,
    input_len: usize,
    horizon: usize,
    batch_size: usize,
}

impl WindowIter<'_> {
    pub fn num_windows(&self) -> usize {
        self.starts.len()
    }

    pub fn num_batches(&self) -> usize {
        self.starts.len().div_ceil(self.batch_size)
    }

    /// Builds the batch for explicit relative window starts.
    pub fn batch_at(&self, starts: &[usize]) -> WindowBatch {
        let src = self.source;
        let (n, l, f, c) = (src.num_roads(), self.input_len, self.horizon, src.channels.len());
        let b = starts.len();
        let mut inputs = Vec::with_capacity(b * n * l * c);
        let mut targets = Vec::with_capacity(b * n * f);
        let mut mask = Vec::with_capacity(b * n * f);
        for &s in starts {
            for road in 0..n {
                for t in s..s + l {
                    for ch in &src.channels {
                        inputs.push(ch[road][t]);
                    }
                }
                targets.extend_from_slice(&src.targets[road][s + l..s + l + f]);
                mask.extend_from_slice(&src.target_mask[road][s + l..s + l + f]);
            }
        }
        WindowBatch {
            inputs: Tensor::new(vec![b, n, l, c], inputs).expect("consistent window shape"),
            targets: Tensor::new(vec![b, n, f], targets).expect("consistent target shape"),
            target_mask: mask,
            window_start_indices: starts.iter().map(|s| s + src.steps.start).collect(),
        }
    }
}

impl Iterator for WindowIter<'_> {
    type Item = WindowBatch;

    fn next(&mut self) -> Option<WindowBatch> {
        if self.pos >= self.starts.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.starts.len());
        let chunk = self.starts[self.pos..end].to_vec();
        self.pos = end;
        Some(self.batch_at(&chunk))
    }
}
