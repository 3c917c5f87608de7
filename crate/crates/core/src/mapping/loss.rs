use nalgebra::Vector3;

use super::{MapModel, MappingError};
use crate::tensor::{ParamStore, Scalar, Tape, Var};

/// Denominator guard for both distance ratios.
pub const EDL_EPS: f64 = 1e-8;

/// Per-row L2 norms of `x` `[n, d]`, as `[n, 1]`.
fn row_norms<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var, MappingError> {
    let d = tape.shape(x)[1];
    let sq = tape.mul(x, x)?;
    let ones = tape.constant_f64(&[d, 1], &vec![1.0; d])?;
    let s = tape.matmul(sq, ones)?;
    Ok(tape.sqrt(s)?)
}

/// Target ratios `‖p_i − p_{i+s}‖ / (‖p_{i+2s} − p_{i+s}‖ + ε)` for every triple.
fn position_ratios(positions: &[Vector3<f64>], stride: usize) -> Vec<f64> {
    let n = positions.len();
    (0..n - 2 * stride)
        .map(|i| {
            let (a, b, c) = (positions[i], positions[i + stride], positions[i + 2 * stride]);
            (a - b).norm() / ((c - b).norm() + EDL_EPS)
        })
        .collect()
}

fn check_triples(n: usize, positions: usize, stride: usize) -> Result<(), MappingError> {
    if n != positions {
        return Err(MappingError::Misaligned {
            embeddings: n,
            positions,
        });
    }
    if stride == 0 {
        return Err(MappingError::InvalidConfig("triple stride must be positive".into()));
    }
    let needed = 2 * stride + 1;
    if n < needed {
        return Err(MappingError::TooFew { needed, got: n });
    }
    Ok(())
}

/// Embedding distance loss over the triples `(i, i+s, i+2s)` of an ordered
/// window `E` `[n, D]`: the mean absolute mismatch between the ratio of
/// consecutive embedding distances and that of consecutive positions.
pub fn edl_var<T: Scalar>(
    tape: &mut Tape<T>,
    embeddings: Var,
    positions: &[Vector3<f64>],
    stride: usize,
) -> Result<Var, MappingError> {
    let n = tape.shape(embeddings)[0];
    check_triples(n, positions.len(), stride)?;
    let m = n - 2 * stride;
    let head = tape.slice(embeddings, 0, 0, n - stride)?;
    let tail = tape.slice(embeddings, 0, stride, n - stride)?;
    let diff = tape.sub(head, tail)?;
    let dist = row_norms(tape, diff)?;
    let num = tape.slice(dist, 0, 0, m)?;
    let den = tape.slice(dist, 0, stride, m)?;
    let den = tape.shift(den, EDL_EPS)?;
    let ratio = tape.div(num, den)?;
    let target = tape.constant_f64(&[m, 1], &position_ratios(positions, stride))?;
    let gap = tape.sub(ratio, target)?;
    let gap = tape.abs(gap)?;
    Ok(tape.mean(gap)?)
}

/// [`edl_var`] evaluated in f64 on plain vectors.
pub fn edl(embeddings: &[Vec<f64>], positions: &[Vector3<f64>], stride: usize) -> Result<f64, MappingError> {
    check_triples(embeddings.len(), positions.len(), stride)?;
    let d = embeddings[0].len();
    if d == 0 || embeddings.iter().any(|e| e.len() != d) {
        return Err(MappingError::InvalidConfig("embeddings must share a positive dimension".into()));
    }
    let flat: Vec<f64> = embeddings.iter().flatten().copied().collect();
    let mut tape = Tape::<f64>::new();
    let e = tape.constant_f64(&[embeddings.len(), d], &flat)?;
    let loss = edl_var(&mut tape, e, positions, stride)?;
    Ok(tape.value(loss).item())
}

/// `KL(N(μ, e^lv) ‖ N(0, I))` summed over dimensions, averaged over rows.
pub fn kl_var<T: Scalar>(tape: &mut Tape<T>, mean: Var, logvar: Var) -> Result<Var, MappingError> {
    let shape = tape.shape(mean).to_vec();
    let numel: usize = shape.iter().product();
    let mu2 = tape.sum_sq(mean)?;
    let var = tape.exp(logvar)?;
    let var = tape.sum(var)?;
    let lv = tape.sum(logvar)?;
    let a = tape.add(mu2, var)?;
    let b = tape.sub(a, lv)?;
    let b = tape.shift(b, -(numel as f64))?;
    Ok(tape.scale(b, 0.5 / shape[0] as f64)?)
}

/// Loss weights and switches for one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapLossWeights {
    pub beta_kl: f64,
    pub lambda_edl: f64,
    pub edl_only: bool,
    pub triple_stride: usize,
}

/// Total loss on the tape plus the value of each component (zero when unused).
#[derive(Debug, Clone, Copy)]
pub struct MapLoss {
    pub total: Var,
    pub recon: f64,
    pub kl: f64,
    pub edl: f64,
}

/// Reconstruction + β·KL (variational only) + λ·EDL on a window of consecutive
/// keyframes `x` `[N, 1, S, S]` with their positions. The EDL term uses the
/// bottleneck means.
#[allow(clippy::too_many_arguments)]
pub fn map_loss<T: Scalar>(
    tape: &mut Tape<T>,
    model: &MapModel,
    store: &ParamStore<T>,
    x: crate::tensor::Var,
    positions: &[Vector3<f64>],
    weights: &MapLossWeights,
    noise: Option<&[f64]>,
) -> Result<MapLoss, MappingError> {
    let out = model.forward(tape, store, x, noise)?;
    let read = |tape: &Tape<T>, v: Var| tape.value(v).item().to_f64();
    let mut terms = Vec::new();
    let (mut recon, mut kl, mut edl) = (0.0, 0.0, 0.0);
    if !weights.edl_only {
        let diff = tape.sub(out.recon, x)?;
        let numel = tape.value(diff).numel();
        let mse = tape.sum_sq(diff)?;
        let mse = tape.scale(mse, 1.0 / numel as f64)?;
        recon = read(tape, mse);
        terms.push(mse);
        if model.config.variational {
            let k = kl_var(tape, out.mean, out.logvar)?;
            kl = read(tape, k);
            terms.push(tape.scale(k, weights.beta_kl)?);
        }
    }
    if weights.lambda_edl > 0.0 || weights.edl_only {
        let e = edl_var(tape, out.mean, positions, weights.triple_stride)?;
        edl = read(tape, e);
        terms.push(tape.scale(e, weights.lambda_edl)?);
    }
    let mut total = match terms.first() {
        Some(&t) => t,
        None => tape.scalar(0.0),
    };
    for &t in &terms[1.min(terms.len())..] {
        total = tape.add(total, t)?;
    }
    Ok(MapLoss {
        total,
        recon,
        kl,
        edl,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mapping::MapConfig;
    use crate::tensor::SeededRng;

    fn line(xs: &[f64]) -> Vec<Vector3<f64>> {
        xs.iter().map(|&x| Vector3::new(x, 0.0, 0.0)).collect()
    }

    #[test]
    fn hand_evaluated_triple() {
        let e = vec![vec![0.0], vec![1.0], vec![3.0]];
        let v = edl(&e, &line(&[0.0, 1.0, 2.0]), 1).unwrap();
        assert!((v - 0.5).abs() < 1e-7, "{v}");
    }

    #[test]
    fn matched_ratios_vanish() {
        let e = vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![2.0, 3.0], vec![2.0, 7.0]];
        let p = line(&[0.0, 4.0, 10.0, 18.0]);
        assert!(edl(&e, &p, 1).unwrap() < 1e-7);
    }

    #[test]
    fn stride_and_size_errors() {
        let e = vec![vec![0.0]; 4];
        assert!(matches!(edl(&e, &line(&[0.0; 4]), 2), Err(MappingError::TooFew { .. })));
        assert!(matches!(edl(&e, &line(&[0.0; 3]), 1), Err(MappingError::Misaligned { .. })));
        assert!(edl(&e[..2], &line(&[0.0; 2]), 1).is_err());
    }

    #[test]
    fn kl_of_standard_normal_is_zero() {
        let mut tape = Tape::<f64>::new();
        let m = tape.constant_f64(&[2, 3], &[0.0; 6]).unwrap();
        let lv = tape.constant_f64(&[2, 3], &[0.0; 6]).unwrap();
        let k = kl_var(&mut tape, m, lv).unwrap();
        assert_eq!(tape.value(k).item(), 0.0);
        let m = tape.constant_f64(&[1, 2], &[1.0, -0.5]).unwrap();
        let lv = tape.constant_f64(&[1, 2], &[0.3, -0.7]).unwrap();
        let k = kl_var(&mut tape, m, lv).unwrap();
        let k = tape.value(k).item();
        let expect: f64 = [(1.0f64, 0.3f64), (-0.5, -0.7)]
            .iter()
            .map(|&(mu, lv)| -0.5 * (1.0 + lv - mu * mu - lv.exp()))
            .sum();
        assert!((k - expect).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_only_when_edl_disabled() {
        let model = MapModel::new(
            MapConfig {
                image_size: 8,
                channels: vec![2, 4],
                embedding_dim: 3,
                variational: false,
                unet: false,
            },
            0,
        )
        .unwrap();
        let mut rng = SeededRng::new(1);
        let img: Vec<f32> = (0..64).map(|_| rng.uniform() as f32).collect();
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(model.batch(&[&img, &img]).unwrap());
        let w = MapLossWeights {
            beta_kl: 1.0,
            lambda_edl: 0.0,
            edl_only: false,
            triple_stride: 1,
        };
        let l = map_loss(&mut tape, &model, &model.store, x, &line(&[0.0, 1.0]), &w, None).unwrap();
        assert_eq!(tape.value(l.total).item() as f64, l.recon);
        assert_eq!((l.kl, l.edl), (0.0, 0.0));
    }
}
