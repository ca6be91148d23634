use std::fmt::Write as _;

use super::{Result, VerifyError};
use crate::data::Dataset;
use crate::net::Network;

/// `|batch variance - moving variance|` of one normalization layer,
/// row-major `channels x batches`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGap {
    pub layer: usize,
    pub channels: usize,
    pub batches: usize,
    pub gaps: Vec<f64>,
}

impl LayerGap {
    pub fn at(&self, channel: usize, batch: usize) -> f64 {
        self.gaps[channel * self.batches + batch]
    }

    pub fn mean(&self) -> f64 {
        self.gaps.iter().sum::<f64>() / self.gaps.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceGapReport {
    pub statistics_batch: usize,
    pub layers: Vec<LayerGap>,
}

impl VarianceGapReport {
    /// Mean over every layer, channel and batch.
    pub fn mean(&self) -> f64 {
        let (sum, n) = self
            .layers
            .iter()
            .fold((0.0, 0usize), |(s, n), l| (s + l.gaps.iter().sum::<f64>(), n + l.gaps.len()));
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    pub fn max(&self) -> f64 {
        self.layers.iter().flat_map(|l| l.gaps.iter().copied()).fold(0.0, f64::max)
    }

    /// Heat-map grid: one row per `(layer, channel)`, one column per batch.
    pub fn to_csv(&self) -> String {
        let batches = self.layers.first().map_or(0, |l| l.batches);
        let mut out = String::from("layer,channel");
        for b in 0..batches {
            let _ = write!(out, ",b{b}");
        }
        out.push('\n');
        for l in &self.layers {
            for c in 0..l.channels {
                let _ = write!(out, "{},{}", l.layer, c);
                for b in 0..l.batches {
                    let _ = write!(out, ",{:e}", l.at(c, b));
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("layer,mean_gap,max_gap\n");
        for l in &self.layers {
            let max = l.gaps.iter().copied().fold(0.0, f64::max);
            let _ = writeln!(out, "{},{:e},{:e}", l.layer, l.mean(), max);
        }
        let _ = writeln!(out, "all,{:e},{:e}", self.mean(), self.max());
        out
    }
}

/// Runs consecutive `stats_batch`-sized slices of `ds` through `net` with
/// batch statistics and compares, per normalization layer and channel, the
/// variance used to normalize against the moving variance. A trailing
/// partial slice is skipped.
pub fn variance_gap(net: &Network, ds: &Dataset, stats_batch: usize) -> Result<VarianceGapReport> {
    if stats_batch == 0 || stats_batch > ds.len() {
        return Err(VerifyError::Config(format!(
            "statistics batch {stats_batch} does not fit a dataset of {}",
            ds.len()
        )));
    }
    if let Some((index, _)) = net.norm_layers().find(|(_, n)| !n.moving.is_seeded()) {
        return Err(VerifyError::Unseeded(index));
    }
    let batches = ds.len() / stats_batch;
    let mut layers: Vec<LayerGap> = net
        .norm_layers()
        .map(|(index, n)| LayerGap {
            layer: index,
            channels: n.channels,
            batches,
            gaps: vec![0.0; n.channels * batches],
        })
        .collect();
    for b in 0..batches {
        let idx: Vec<usize> = (b * stats_batch..(b + 1) * stats_batch).collect();
        let (x, _) = ds.batch(&idx);
        let (_, traces) = net.forward_eval(&x, true, true)?;
        for (gap, trace) in layers.iter_mut().zip(&traces) {
            for (c, (bv, mv)) in trace.batch_var.iter().zip(&trace.moving_var).enumerate() {
                gap.gaps[c * batches + b] = (bv - mv).abs();
            }
        }
    }
    Ok(VarianceGapReport {
        statistics_batch: stats_batch,
        layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_gaussian_mixture;
    use crate::net::{ArchSpec, Layer, NormSettings};
    use crate::norm::{Covariance, MovingStatistics, NormKind};
    use crate::tensor::Tensor;

    fn arch() -> ArchSpec {
        ArchSpec {
            widths: vec![3, 4],
            classes: 3,
        }
    }

    #[test]
    fn one_full_batch_update_closes_gap() {
        let ds = synth_gaussian_mixture(3, 4, (2, 3, 3), 0.3, 1).unwrap();
        for kind in [NormKind::Bn, NormKind::Bkn] {
            let settings = NormSettings {
                alpha: 1.0,
                ..NormSettings::default()
            };
            let mut net = Network::desk((2, 3, 3), &arch(), kind, settings, 3);
            net.forward_train(&ds.images).unwrap();
            let report = variance_gap(&net, &ds, ds.len()).unwrap();
            assert_eq!(report.layers.len(), 2);
            assert!(report.max() <= 1e-12, "{kind:?} {}", report.max());
        }
    }

    #[test]
    fn identical_samples_gap_is_moving_variance() {
        // 1x1 images so every conv output position sees the same input
        let ds = Dataset::new(Tensor::full(&[4, 1, 1, 1], 0.5), vec![0, 1, 0, 1], 2).unwrap();
        let mut net = Network::desk((1, 1, 1), &arch(), NormKind::Bn, NormSettings::default(), 5);
        for layer in &mut net.layers {
            if let Layer::Norm(n) = layer {
                n.moving = MovingStatistics::seeded(
                    vec![0.0; n.channels],
                    Covariance::Diag((0..n.channels).map(|c| 0.5 + c as f64).collect()),
                    0.01,
                );
            }
        }
        let report = variance_gap(&net, &ds, 2).unwrap();
        assert_eq!(report.layers[0].batches, 2);
        for c in 0..3 {
            for b in 0..2 {
                assert_eq!(report.layers[0].at(c, b), 0.5 + c as f64);
            }
        }
    }

    #[test]
    fn unseeded_is_an_error() {
        let ds = synth_gaussian_mixture(3, 2, (2, 3, 3), 0.3, 1).unwrap();
        let net = Network::desk((2, 3, 3), &arch(), NormKind::Bn, NormSettings::default(), 3);
        assert!(matches!(variance_gap(&net, &ds, 2), Err(VerifyError::Unseeded(1))));
    }

    #[test]
    fn csv_layout() {
        let report = VarianceGapReport {
            statistics_batch: 2,
            layers: vec![LayerGap {
                layer: 1,
                channels: 2,
                batches: 3,
                gaps: vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0],
            }],
        };
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "layer,channel,b0,b1,b2");
        assert_eq!(lines[2], "1,1,3e0,4e0,5e0");
        assert_eq!(report.mean(), 2.5);
        assert_eq!(report.max(), 5.0);
    }
}
