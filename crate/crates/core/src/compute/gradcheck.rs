use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ComputeError, Graph, Mode, Tensor, Var};

/// Coordinates whose relative error exceeds this value are listed individually.
pub const REPORT_THRESHOLD: f64 = 1e-3;

/// Denominator floor of the relative error, so gradients at the round-off
/// level of the loss are compared absolutely.
const RELATIVE_FLOOR: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Coordinate {
    pub tensor: usize,
    pub index: usize,
}

#[derive(Clone, Debug)]
pub struct Mismatch {
    pub at: Coordinate,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<Coordinate>,
    pub mismatches: Vec<Mismatch>,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` builds a scalar loss on a fresh evaluation-mode graph from the bound
/// parameter leaves. At most `samples` coordinates are drawn uniformly over
/// all parameter entries (all of them when there are fewer).
pub fn finite_diff_check<F, E>(
    mut f: F,
    params: &[Tensor<f64>],
    step: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport, E>
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var, E>,
    E: From<ComputeError>,
{
    let mut g = Graph::new(Mode::Eval);
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            g.grad(v)
                .map(|t| t.into_data())
                .unwrap_or_else(|| vec![0.0; p.numel()])
        })
        .collect();

    let offsets: Vec<usize> = params
        .iter()
        .scan(0, |acc, p| {
            let o = *acc;
            *acc += p.numel();
            Some(o)
        })
        .collect();
    let total: usize = params.iter().map(Tensor::numel).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flat: Vec<usize> = if total <= samples {
        (0..total).collect()
    } else {
        sample(&mut rng, total, samples).into_vec()
    };
    flat.sort_unstable();

    let mut eval = |perturbed: &[Tensor<f64>]| -> Result<f64, E> {
        let mut g = Graph::new(Mode::Eval);
        let vars: Vec<Var> = perturbed.iter().map(|p| g.param(p.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        checked: flat.len(),
        max_rel_error: 0.0,
        worst: None,
        mismatches: Vec::new(),
    };
    for k in flat {
        let tensor = offsets.partition_point(|&o| o <= k) - 1;
        let index = k - offsets[tensor];
        let original = work[tensor].data()[index];
        work[tensor].data_mut()[index] = original + step;
        let up = eval(&work)?;
        work[tensor].data_mut()[index] = original - step;
        let down = eval(&work)?;
        work[tensor].data_mut()[index] = original;

        let numeric = (up - down) / (2.0 * step);
        let a = analytic[tensor][index];
        let rel = relative_error(a, numeric);
        let at = Coordinate { tensor, index };
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = rel.max(report.max_rel_error);
            report.worst = Some(at);
        }
        if rel > REPORT_THRESHOLD {
            report.mismatches.push(Mismatch {
                at,
                analytic: a,
                numeric,
                rel_error: rel,
            });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_sits_at_noise_floor() {
        let w = Tensor::from_f64(&[3, 1], &[0.5, -1.5, 2.0]).unwrap();
        let report = finite_diff_check::<_, ComputeError>(
            |g, p| {
                let x = g.constant(Tensor::from_f64(&[1, 3], &[1.0, 2.0, 3.0]).unwrap());
                let y = g.matmul(x, p[0])?;
                Ok(g.sum(y))
            },
            &[w],
            1e-5,
            100,
            0,
        )
        .unwrap();
        assert_eq!(report.checked, 3);
        assert!(report.max_rel_error < 1e-9, "{report:?}");
    }

    #[test]
    fn softmax_cross_entropy_composite() {
        let w = Tensor::from_f64(&[4, 3], &[0.2, -0.1, 0.4, 0.7, 0.3, -0.5, 0.1, 0.9, -0.3, 0.0, 0.2, 0.6])
            .unwrap();
        let report = finite_diff_check::<_, ComputeError>(
            |g, p| {
                let x = g.constant(
                    Tensor::from_f64(&[2, 4], &[1.0, -2.0, 0.5, 0.3, 0.2, 0.1, -1.0, 2.0]).unwrap(),
                );
                let h = g.matmul(x, p[0])?;
                let s = g.softmax_lastdim(h)?;
                let s = g.scale(s, 3.0);
                g.cross_entropy_logits(s, &[Some(2), Some(0)])
            },
            &[w],
            1e-5,
            100,
            1,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn every_primitive_passes() {
        let params = vec![
            Tensor::from_f64(&[3, 4], &(0..12).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.3).collect::<Vec<_>>())
                .unwrap(),
            Tensor::from_f64(&[4], &[1.1, 0.9, 1.2, 0.8]).unwrap(),
            Tensor::from_f64(&[4], &[0.1, -0.2, 0.0, 0.3]).unwrap(),
            Tensor::from_f64(&[5, 3], &(0..15).map(|i| ((i * 3 % 7) as f64 - 3.0) * 0.25).collect::<Vec<_>>())
                .unwrap(),
        ];
        let report = finite_diff_check::<_, ComputeError>(
            |g, p| {
                let e = g.embedding_gather(p[3], &[4, 1, 1, 0])?;
                let h = g.matmul(e, p[0])?;
                let h = g.layer_norm(h, p[1], p[2], 1e-5)?;
                let r = g.relu(h);
                let t = g.transpose(r)?;
                let sq = g.matmul(r, t)?;
                let a = g.slice_cols(sq, 0, 2)?;
                let b = g.slice_cols(sq, 2, 4)?;
                let m = g.mul(a, b)?;
                let c = g.concat_lastdim(&[m, a])?;
                let top = g.slice_rows(c, 0, 1)?;
                let rest = g.slice_rows(c, 1, 4)?;
                let c = g.concat_rows(&[rest, top])?;
                let c = g.add(c, c)?;
                g.cross_entropy_logits(c, &[Some(0), None, Some(3), Some(1)])
            },
            &params,
            1e-5,
            1000,
            2,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn mismatch_is_reported_with_coordinate() {
        // A loss that mixes the parameter through a non-differentiable
        // graph-external path gives a wrong analytic gradient.
        let w = Tensor::from_f64(&[1, 2], &[1.0, 2.0]).unwrap();
        let report = finite_diff_check::<_, ComputeError>(
            |g, p| {
                let v = g.value(p[0]).clone();
                let frozen = g.constant(v);
                let y = g.mul(p[0], frozen)?;
                Ok(g.sum(y))
            },
            &[w],
            1e-5,
            10,
            0,
        )
        .unwrap();
        assert!(report.max_rel_error > REPORT_THRESHOLD);
        assert_eq!(report.mismatches.len(), 2);
        assert_eq!(report.mismatches[1].at, Coordinate { tensor: 0, index: 1 });
    }
}
