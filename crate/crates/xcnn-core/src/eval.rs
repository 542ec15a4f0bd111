//! Test-set accuracy and the adaptive subset schedule used by sweeps.

use alloc::vec::Vec;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::NetworkGraph;
use crate::scalar::Scalar;
use crate::tensor::Tape;

/// Index of the largest entry; ties go to the first.
pub fn argmax<F: Scalar>(row: &[F]) -> u32 {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

/// Inference-mode class predictions over (up to `limit`) images.
pub fn predictions<F: Scalar>(
    graph: &NetworkGraph<F>,
    ds: &Dataset<F>,
    batch_size: usize,
    limit: Option<usize>,
) -> Result<Vec<u32>> {
    if batch_size == 0 {
        return Err(Error::invalid("predictions", "batch size 0"));
    }
    let n = limit.map_or(ds.len(), |l| l.min(ds.len()));
    if n == 0 {
        return Err(Error::EmptyDataset { context: "predictions".into() });
    }
    let classes = ds.num_classes();
    let mut preds = Vec::with_capacity(n);
    let indices: Vec<usize> = (0..n).collect();
    for chunk in indices.chunks(batch_size) {
        let (batch, _) = ds.batch(chunk)?;
        let mut tape = Tape::new();
        let out = graph.forward_infer(&mut tape, &batch)?;
        let logits = tape.value(out.logits)?;
        preds.extend(logits.chunks(classes).map(argmax));
    }
    Ok(preds)
}

/// Fraction of matching predictions.
pub fn accuracy_of(preds: &[u32], labels: &[u32]) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / preds.len() as f64
}

/// Accuracy of a model on (up to `limit`) images of a dataset.
pub fn accuracy<F: Scalar>(
    graph: &NetworkGraph<F>,
    ds: &Dataset<F>,
    batch_size: usize,
    limit: Option<usize>,
) -> Result<f64> {
    let preds = predictions(graph, ds, batch_size, limit)?;
    Ok(accuracy_of(&preds, &ds.labels()[..preds.len()]))
}

/// Subset sizes (percent of the training set) every sweep must cover.
pub const MANDATORY_SUBSETS: [usize; 8] = [1, 5, 10, 15, 20, 30, 40, 50];

/// Mean-accuracy gap (as a fraction) below which the sweep stops extending
/// past 50%: half a percentage point.
pub const SUBSET_GAP_THRESHOLD: f64 = 0.005;

/// Drive a subset sweep.  `gap_at(p)` runs both models of a pair at `p`% and
/// returns the absolute difference of their mean accuracies (fraction).
///
/// All mandatory sizes are visited; afterwards the sweep keeps adding 10
/// points while the models still disagree by more than the threshold, up to
/// 90%, and always finishes with the full set.  Returns `(percent, gap)` in
/// visit order.
pub fn run_schedule<E: FnMut(usize) -> f64>(mut gap_at: E) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64)> = Vec::new();
    for p in MANDATORY_SUBSETS {
        out.push((p, gap_at(p)));
    }
    loop {
        let &(p, gap) = out.last().expect("mandatory points visited");
        if p >= 90 || gap.abs() <= SUBSET_GAP_THRESHOLD {
            break;
        }
        let next = p + 10;
        out.push((next, gap_at(next)));
    }
    out.push((100, gap_at(100)));
    out
}

/// The percents a schedule would visit given per-point gaps, for planning
/// (dry runs) and tests.
pub fn schedule_points<E: FnMut(usize) -> f64>(gap_at: E) -> Vec<usize> {
    run_schedule(gap_at).into_iter().map(|(p, _)| p).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_first_on_ties() {
        assert_eq!(argmax(&[0.1f32, 0.8, 0.8, 0.2]), 1);
        assert_eq!(argmax(&[3.0f32]), 0);
    }

    #[test]
    fn accuracy_of_counts_hits() {
        assert_eq!(accuracy_of(&[1, 2, 3, 4], &[1, 0, 3, 0]), 0.5);
        assert_eq!(accuracy_of(&[], &[]), 0.0);
    }

    #[test]
    fn schedule_stops_at_fifty_when_models_agree() {
        let pts = schedule_points(|_| 0.004);
        assert_eq!(pts, vec![1, 5, 10, 15, 20, 30, 40, 50, 100]);
    }

    #[test]
    fn schedule_extends_while_gap_stays_open() {
        // Gap stays above half a point through 80%, closes at 80.
        let pts = schedule_points(|p| if p < 80 { 0.02 } else { 0.001 });
        assert_eq!(pts, vec![1, 5, 10, 15, 20, 30, 40, 50, 60, 70, 80, 100]);
    }

    #[test]
    fn schedule_never_extends_past_ninety() {
        let pts = schedule_points(|_| 0.5);
        assert_eq!(pts, vec![1, 5, 10, 15, 20, 30, 40, 50, 60, 70, 80, 90, 100]);
    }

    #[test]
    fn schedule_checks_the_new_point_each_round() {
        // Gap closes exactly at 60: extend once, then stop.
        let pts = schedule_points(|p| if p <= 50 { 0.01 } else { 0.005 });
        assert_eq!(pts, vec![1, 5, 10, 15, 20, 30, 40, 50, 60, 100]);
    }

    #[test]
    fn evaluation_runs_over_batches() {
        use crate::data::synthetic_random;
        use crate::graph::{ArchitectureSpec, NetworkGraph, SuperlayerSpec};
        use crate::layers::LayerSpec;
        use alloc::string::ToString;
        use alloc::vec;

        let spec = ArchitectureSpec {
            name: "probe".to_string(),
            input_height: 4,
            input_width: 4,
            superlayers: vec![SuperlayerSpec {
                name: "rgb".to_string(),
                in_channels: 1,
                stages: vec![vec![LayerSpec::Conv { out_channels: 2, kernel: 3 }, LayerSpec::Relu]],
            }],
            cross: vec![],
            tail: vec![LayerSpec::Flatten, LayerSpec::Dense { units: 2 }, LayerSpec::Softmax],
            num_classes: 2,
        };
        let g = NetworkGraph::<f32>::build(spec, 1).unwrap();
        let ds = synthetic_random::<f32>(7, 2, 1, 4, 4, 0).unwrap();
        // Odd count with batch 3 exercises the partial final batch.
        let preds = predictions(&g, &ds, 3, None).unwrap();
        assert_eq!(preds.len(), 7);
        let acc = accuracy(&g, &ds, 3, Some(5)).unwrap();
        assert!((0.0..=1.0).contains(&acc));
        let capped = predictions(&g, &ds, 3, Some(2)).unwrap();
        assert_eq!(capped.len(), 2);
    }
}
