use super::{FusedInput, FusionError, FusionModel, HeadQuery};
use crate::numkernel::{Graph, Real, Tensor};

/// Attention probabilities of every layer and head for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaps<T> {
    pub text_len: usize,
    pub num_regions: usize,
    /// `layers[l][h]` is `[seq, seq]`.
    pub layers: Vec<Vec<Tensor<T>>>,
}

impl<T: Real> AttentionMaps<T> {
    /// Head-averaged `[seq, seq]` map of one layer.
    pub fn head_average(&self, layer: usize) -> Vec<Vec<f64>> {
        let heads = &self.layers[layer];
        let n = self.text_len + self.num_regions;
        let mut avg = vec![vec![0.0; n]; n];
        for h in heads {
            for (r, row) in avg.iter_mut().enumerate() {
                for (c, v) in row.iter_mut().enumerate() {
                    *v += h.row(r)[c].as_f64();
                }
            }
        }
        let k = heads.len() as f64;
        avg.iter_mut().flatten().for_each(|v| *v /= k);
        avg
    }

    /// Mean attention from the given text positions to each region, using the
    /// head-averaged map of `layer`.
    pub fn text_to_regions(&self, layer: usize, positions: &[usize]) -> Vec<f64> {
        let avg = self.head_average(layer);
        let mut out = vec![0.0; self.num_regions];
        for &p in positions {
            for (r, o) in out.iter_mut().enumerate() {
                *o += avg[p][self.text_len + r];
            }
        }
        if !positions.is_empty() {
            out.iter_mut().for_each(|o| *o /= positions.len() as f64);
        }
        out
    }

    /// Region receiving the most attention from `positions`; lowest index on ties.
    pub fn attended_region(&self, layer: usize, positions: &[usize]) -> Option<usize> {
        let scores = self.text_to_regions(layer, positions);
        let mut best: Option<(usize, f64)> = None;
        for (i, &s) in scores.iter().enumerate() {
            if best.map_or(true, |(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        best.map(|(i, _)| i)
    }
}

pub fn attention_probe<T: Real>(
    model: &FusionModel<T>,
    input: &FusedInput,
) -> Result<AttentionMaps<T>, FusionError> {
    let mut g = Graph::new(model.params());
    let q = HeadQuery {
        attention: true,
        ..HeadQuery::default()
    };
    let out = model.forward(&mut g, input, &q)?;
    Ok(AttentionMaps {
        text_len: input.text_len(),
        num_regions: input.num_regions(),
        layers: out
            .attention
            .iter()
            .map(|heads| heads.iter().map(|&v| g.tensor(v)).collect())
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn maps() -> AttentionMaps<f64> {
        // 2 text positions, 2 regions, 2 heads.
        let h0 = Tensor::from_rows(&[
            vec![0.25, 0.25, 0.25, 0.25],
            vec![0.1, 0.1, 0.6, 0.2],
            vec![0.25, 0.25, 0.25, 0.25],
            vec![0.25, 0.25, 0.25, 0.25],
        ])
        .unwrap();
        let h1 = Tensor::from_rows(&[
            vec![0.25, 0.25, 0.25, 0.25],
            vec![0.1, 0.1, 0.2, 0.6],
            vec![0.25, 0.25, 0.25, 0.25],
            vec![0.25, 0.25, 0.25, 0.25],
        ])
        .unwrap();
        AttentionMaps {
            text_len: 2,
            num_regions: 2,
            layers: vec![vec![h0, h1.clone()], vec![h1.clone(), h1]],
        }
    }

    #[test]
    fn head_average_and_region_slice() {
        let m = maps();
        let s = m.text_to_regions(0, &[1]);
        assert!((s[0] - 0.4).abs() < 1e-12 && (s[1] - 0.4).abs() < 1e-12);
        assert_eq!(m.attended_region(0, &[1]), Some(0));
        assert_eq!(m.attended_region(1, &[1]), Some(1));
    }
}
