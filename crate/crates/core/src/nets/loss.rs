use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

const DICE_EPS: f64 = 1e-6;

/// `[N, K, H, W]` one-hot encoding of `N*H*W` labels.
pub fn one_hot(labels: &[u8], n: usize, k: usize, h: usize, w: usize) -> Result<Tensor> {
    let hw = h * w;
    if labels.len() != n * hw {
        return Err(Error::shape(format!("{} labels for {n}x{h}x{w}", labels.len())));
    }
    let mut data = vec![0.0; n * k * hw];
    for (i, l) in labels.iter().enumerate() {
        let l = *l as usize;
        if l >= k {
            return Err(Error::invalid(format!("label {l} outside 0..{k}")));
        }
        let (ni, p) = (i / hw, i % hw);
        data[(ni * k + l) * hw + p] = 1.0;
    }
    Tensor::new(vec![n, k, h, w], data)
}

/// Soft Dice loss averaged over foreground classes:
/// `1 - mean_{k>=1} (2 sum p g + eps) / (sum p + sum g + eps)`.
pub fn dice_loss(tape: &mut Tape, probs: Var, target: Var) -> Result<Var> {
    let (sp, st) = (tape.shape(probs).to_vec(), tape.shape(target).to_vec());
    if sp != st || sp.len() != 4 {
        return Err(Error::shape(format!("dice_loss probs {sp:?} vs labels {st:?}")));
    }
    let k = sp[1];
    if k < 2 {
        return Err(Error::shape("dice_loss needs a background and a foreground class"));
    }
    let pg = tape.mul(probs, target)?;
    let inter = tape.reduce_sum(pg, &[0, 2, 3])?;
    let sum_p = tape.reduce_sum(probs, &[0, 2, 3])?;
    let sum_g = tape.reduce_sum(target, &[0, 2, 3])?;
    let num = tape.scale(inter, 2.0);
    let num = tape.add_scalar(num, DICE_EPS);
    let den = tape.add(sum_p, sum_g)?;
    let den = tape.add_scalar(den, DICE_EPS);
    let ratio = tape.div(num, den)?;
    let fg = tape.gather(ratio, (1..k).collect(), &[k - 1])?;
    let mean = tape.mean(fg)?;
    let neg = tape.neg(mean);
    Ok(tape.add_scalar(neg, 1.0))
}

/// Mean per-pixel prediction entropy `-sum_k p_k ln p_k`.
pub fn entropy_loss(tape: &mut Tape, probs: Var) -> Result<Var> {
    let (n, _, h, w) = tape.value(probs).dims4()?;
    let safe = tape.clamp_min(probs, 1e-300);
    let logp = tape.ln(safe);
    let plogp = tape.mul(probs, logp)?;
    let total = tape.sum(plogp);
    Ok(tape.scale(total, -1.0 / (n * h * w) as f64))
}

/// Argmax class per pixel of `[N, K, H, W]` probabilities.
pub fn predict_labels(probs: &Tensor) -> Result<Vec<u8>> {
    let (n, k, h, w) = probs.dims4()?;
    let hw = h * w;
    let d = probs.data();
    let mut out = Vec::with_capacity(n * hw);
    for ni in 0..n {
        for p in 0..hw {
            let mut best = 0;
            for c in 1..k {
                if d[(ni * k + c) * hw + p] > d[(ni * k + best) * hw + p] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    Ok(out)
}

/// Hard Dice per foreground class `1..k`. A class absent from both maps scores 1.
pub fn dice_scores(pred: &[u8], truth: &[u8], k: usize) -> Result<Vec<f64>> {
    if pred.len() != truth.len() {
        return Err(Error::shape(format!("{} predictions vs {} labels", pred.len(), truth.len())));
    }
    let mut inter = vec![0usize; k];
    let mut sp = vec![0usize; k];
    let mut st = vec![0usize; k];
    for (p, t) in pred.iter().zip(truth) {
        let (p, t) = (*p as usize, *t as usize);
        if p >= k || t >= k {
            return Err(Error::invalid(format!("label outside 0..{k}")));
        }
        sp[p] += 1;
        st[t] += 1;
        if p == t {
            inter[p] += 1;
        }
    }
    Ok((1..k)
        .map(|c| {
            let den = sp[c] + st[c];
            if den == 0 {
                1.0
            } else {
                2.0 * inter[c] as f64 / den as f64
            }
        })
        .collect())
}
