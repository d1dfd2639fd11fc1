#![allow(dead_code)]

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rnd_int(rng: &mut ChaCha8Rng, lo: i64, hi: i64) -> i64 {
    let x = rng.next_u64() as u128;
    lo + ((x * (hi - lo + 1) as u128) >> 64) as i64
}

fn rnd_real(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    let x = rng.next_u64();
    lo + (hi - lo) * ((x >> 11) as f64 / 9007199254740992.0)
}

/// Straight-line transcription of the swap loop over a grid of patch
/// vectors, drawing from the raw ChaCha8 stream. Returns the swapped grid
/// and the mask.
#[allow(clippy::too_many_arguments)]
pub fn naive_swap(
    earlier: &[Vec<f32>],
    later: &[Vec<f32>],
    h: usize,
    w: usize,
    ratio: f64,
    min_bs: usize,
    min_ar: f64,
    seed: u64,
) -> (Vec<Vec<f32>>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    let mut out = earlier.to_vec();
    let mut mask = vec![false; h * w];
    let n_p = (h * w) as f64;
    let mut c = 0.0f64;
    while c <= ratio * n_p {
        let top_bs = (ratio * n_p - c).floor() as i64;
        if top_bs < min_bs as i64 {
            break;
        }
        let bs = rnd_int(&mut rng, min_bs as i64, top_bs) as f64;
        let ar = rnd_real(&mut rng, min_ar, 1.0 / min_ar);
        let m = ((bs * ar).sqrt().round() as usize).max(1).min(h);
        let n = ((bs / ar).sqrt().round() as usize).max(1).min(w);
        let p = rnd_int(&mut rng, 0, (h - m) as i64) as usize;
        let q = rnd_int(&mut rng, 0, (w - n) as i64) as usize;
        for i in p..p + m {
            for j in q..q + n {
                let k = i * w + j;
                out[k] = later[k].clone();
                mask[k] = true;
            }
        }
        c += (m * n) as f64;
    }
    (out, mask)
}

/// Area under the ROC curve by the rank-sum statistic, ties averaged.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> f64 {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    let pos = positive.iter().filter(|&&p| p).count() as f64;
    let neg = positive.len() as f64 - pos;
    let sum: f64 = ranks.iter().zip(positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    (sum - pos * (pos + 1.0) / 2.0) / (pos * neg)
}

/// Fraction of the other entries strictly below `values[k]`, ties counted
/// half.
pub fn percentile_rank(values: &[f64], k: usize) -> f64 {
    let below = values.iter().filter(|&&v| v < values[k]).count() as f64;
    let ties = values.iter().filter(|&&v| v == values[k]).count() as f64 - 1.0;
    (below + ties / 2.0) / (values.len() as f64 - 1.0)
}
