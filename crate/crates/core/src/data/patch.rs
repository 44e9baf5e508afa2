use ndarray::Array3;

use super::{DataError, Result, SignalTensor};

const SECONDS_PER_DAY: i64 = 86_400;

/// Non-overlapping per-node patches with their calendar indices.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    /// `[node][patch][channel * patch_len + step]`
    pub values: Array3<f64>,
    pub patch_len: usize,
    pub num_channels: usize,
    pub tod_index: Vec<usize>,
    pub dow_index: Vec<usize>,
    pub start_epoch: i64,
    pub interval: i64,
    pub channel_names: Vec<String>,
}

impl PatchSet {
    pub fn num_nodes(&self) -> usize {
        self.values.dim().0
    }

    pub fn num_patches(&self) -> usize {
        self.values.dim().1
    }

    pub fn width(&self) -> usize {
        self.values.dim().2
    }
}

pub fn patchify(signal: &SignalTensor, patch_len: usize) -> Result<PatchSet> {
    let (n, t_raw, dx) = signal.values.dim();
    if patch_len == 0 || t_raw % patch_len != 0 || t_raw == 0 {
        return Err(DataError::NotDivisible { len: t_raw, patch: patch_len });
    }
    let t_p = t_raw / patch_len;
    let mut values = Array3::zeros((n, t_p, patch_len * dx));
    for i in 0..n {
        for p in 0..t_p {
            for c in 0..dx {
                for s in 0..patch_len {
                    values[[i, p, c * patch_len + s]] = signal.values[[i, p * patch_len + s, c]];
                }
            }
        }
    }
    let (tod_index, dow_index) = time_features(signal, patch_len);
    Ok(PatchSet {
        values,
        patch_len,
        num_channels: dx,
        tod_index,
        dow_index,
        start_epoch: signal.start_epoch,
        interval: signal.interval,
        channel_names: signal.channel_names.clone(),
    })
}

pub fn unpatchify(patches: &PatchSet) -> Result<SignalTensor> {
    let (n, t_p, width) = patches.values.dim();
    let (l, dx) = (patches.patch_len, patches.num_channels);
    if l * dx != width {
        return Err(DataError::DimensionMismatch(format!("patch width {width} != {l} x {dx}")));
    }
    let mut values = Array3::zeros((n, t_p * l, dx));
    for i in 0..n {
        for p in 0..t_p {
            for c in 0..dx {
                for s in 0..l {
                    values[[i, p * l + s, c]] = patches.values[[i, p, c * l + s]];
                }
            }
        }
    }
    Ok(SignalTensor {
        values,
        start_epoch: patches.start_epoch,
        interval: patches.interval,
        channel_names: patches.channel_names.clone(),
    })
}

/// Hour of day and day of week (Monday = 0, UTC) of each patch's first step.
pub fn time_features(signal: &SignalTensor, patch_len: usize) -> (Vec<usize>, Vec<usize>) {
    let t_p = signal.num_steps() / patch_len.max(1);
    (0..t_p)
        .map(|p| {
            let ts = signal.timestamp(p * patch_len);
            calendar(ts)
        })
        .unzip()
}

/// `(hour_of_day, day_of_week)` of an epoch timestamp; 1970-01-01 was a Thursday.
pub fn calendar(ts: i64) -> (usize, usize) {
    let days = ts.div_euclid(SECONDS_PER_DAY);
    let secs = ts.rem_euclid(SECONDS_PER_DAY);
    ((secs / 3600) as usize, (days + 3).rem_euclid(7) as usize)
}
