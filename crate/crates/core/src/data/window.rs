use serde::{Deserialize, Serialize};

use super::MotionSequence;
use crate::diff::Tensor;
use crate::error::{Error, Result};

/// `H` observed frames followed directly by `T` future frames of one source.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleWindow {
    pub source: usize,
    pub start: usize,
    pub past: Tensor,
    pub future: Tensor,
}

impl SampleWindow {
    pub fn last_past_pose(&self) -> &[f64] {
        self.past.row(self.past.rows() - 1)
    }

    pub fn dim(&self) -> usize {
        self.past.cols()
    }
}

/// Every window of `h + t` frames starting at multiples of `stride`.
pub fn window(
    seq: &MotionSequence,
    source: usize,
    h: usize,
    t: usize,
    stride: usize,
) -> Result<Vec<SampleWindow>> {
    if h == 0 || t == 0 || stride == 0 {
        return Err(Error::Contract(format!(
            "window needs H, T, stride ≥ 1, got {h}, {t}, {stride}"
        )));
    }
    let f = seq.frame_count();
    if f < h + t {
        return Ok(Vec::new());
    }
    Ok((0..=f - h - t)
        .step_by(stride)
        .map(|start| SampleWindow {
            source,
            start,
            past: seq.frames().slice_rows(start, start + h),
            future: seq.frames().slice_rows(start + h, start + h + t),
        })
        .collect())
}

/// For each anchor window, the indices of all windows (itself included)
/// whose last observed pose lies within `threshold` of the anchor's.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoGtSet {
    pub threshold: f64,
    pub matches: Vec<Vec<usize>>,
}

impl PseudoGtSet {
    pub fn of(&self, anchor: usize) -> &[usize] {
        &self.matches[anchor]
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mines pseudo ground truth by last-pose distance.
///
/// Windows are swept in order of their most spread-out coordinate; a pair whose
/// projections differ by more than the threshold cannot match, which prunes the
/// quadratic scan.
pub fn mine_pseudo_gt(windows: &[SampleWindow], threshold: f64) -> Result<PseudoGtSet> {
    if !(threshold > 0.0) {
        return Err(Error::Contract(format!(
            "pseudo-GT threshold must be positive, got {threshold}"
        )));
    }
    let n = windows.len();
    let mut matches = vec![Vec::new(); n];
    if n == 0 {
        return Ok(PseudoGtSet { threshold, matches });
    }
    let d = windows[0].dim();
    if windows.iter().any(|w| w.dim() != d) {
        return Err(Error::dim("mine_pseudo_gt", "windows mix skeletons"));
    }
    let poses: Vec<&[f64]> = windows.iter().map(SampleWindow::last_past_pose).collect();
    let axis = (0..d)
        .map(|k| {
            let mean = poses.iter().map(|p| p[k]).sum::<f64>() / n as f64;
            let var = poses.iter().map(|p| (p[k] - mean).powi(2)).sum::<f64>();
            (k, var)
        })
        .fold((0, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best })
        .0;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| poses[a][axis].total_cmp(&poses[b][axis]));
    let t2 = threshold * threshold;
    for (pos, &a) in order.iter().enumerate() {
        matches[a].push(a);
        for &b in &order[pos + 1..] {
            if poses[b][axis] - poses[a][axis] > threshold {
                break;
            }
            if sq_dist(poses[a], poses[b]) <= t2 {
                matches[a].push(b);
                matches[b].push(a);
            }
        }
    }
    for m in &mut matches {
        m.sort_unstable();
    }
    Ok(PseudoGtSet { threshold, matches })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seq(frames: usize, dim: usize) -> MotionSequence {
        let data = (0..frames * dim).map(|i| i as f64).collect();
        MotionSequence::new(Tensor::matrix(frames, dim, data), 50.0).unwrap()
    }

    fn win(last: Vec<f64>) -> SampleWindow {
        let d = last.len();
        SampleWindow {
            source: 0,
            start: 0,
            past: Tensor::matrix(1, d, last),
            future: Tensor::zeros(1, d),
        }
    }

    #[test]
    fn window_enumeration() {
        let w = window(&seq(140, 3), 0, 25, 100, 15).unwrap();
        assert_eq!(w.iter().map(|w| w.start).collect::<Vec<_>>(), vec![0, 15]);
        assert!(window(&seq(124, 3), 0, 25, 100, 1).unwrap().is_empty());
        assert_eq!(window(&seq(125, 3), 0, 25, 100, 7).unwrap().len(), 1);
    }

    #[test]
    fn future_follows_past_contiguously() {
        let s = seq(40, 3);
        for w in window(&s, 3, 5, 7, 4).unwrap() {
            assert_eq!(w.source, 3);
            assert_eq!(w.past.row(0), s.frame(w.start));
            assert_eq!(w.future.row(0), s.frame(w.start + 5));
            assert_eq!(w.future.row(6), s.frame(w.start + 11));
            assert!(w.start + 12 <= 40);
        }
    }

    #[test]
    fn rejects_zero_lengths() {
        assert!(window(&seq(10, 3), 0, 0, 2, 1).is_err());
        assert!(mine_pseudo_gt(&[], 0.0).is_err());
    }

    #[test]
    fn identical_windows_match_each_other() {
        let ws = vec![win(vec![1.0, 2.0, 3.0]), win(vec![1.0, 2.0, 3.0])];
        let set = mine_pseudo_gt(&ws, 0.5).unwrap();
        assert_eq!(set.of(0), &[0, 1]);
        assert_eq!(set.of(1), &[0, 1]);
    }

    #[test]
    fn threshold_excludes_farther_poses() {
        let ws = vec![win(vec![0.0, 0.0, 0.0]), win(vec![0.6, 0.0, 0.0])];
        let set = mine_pseudo_gt(&ws, 0.5).unwrap();
        assert_eq!(set.of(0), &[0]);
        assert_eq!(set.of(1), &[1]);
    }

    #[test]
    fn pruned_sweep_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let ws: Vec<SampleWindow> = (0..50)
                .map(|_| win((0..6).map(|_| rng.random_range(-0.6..0.6)).collect()))
                .collect();
            let set = mine_pseudo_gt(&ws, 0.5).unwrap();
            for a in 0..ws.len() {
                let brute: Vec<usize> = (0..ws.len())
                    .filter(|&b| {
                        let d: f64 = ws[a]
                            .last_past_pose()
                            .iter()
                            .zip(ws[b].last_past_pose())
                            .map(|(x, y)| (x - y).powi(2))
                            .sum::<f64>()
                            .sqrt();
                        d <= 0.5
                    })
                    .collect();
                assert_eq!(set.of(a), &brute[..]);
                for &b in set.of(a) {
                    assert!(set.of(b).contains(&a));
                }
            }
        }
    }
}
