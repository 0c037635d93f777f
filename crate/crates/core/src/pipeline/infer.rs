//! Network input assembly, prediction and majority-vote fusion.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::nn::{Tensor5, UNet, UNetParams};
use crate::saliency::SaliencyMap;
use crate::volume::{Mask3, Volume3};

/// Stacks the CT (and saliency) into a `(1, C, z, y, x)` tensor.
pub fn input_tensor(ct_norm: &Volume3, saliency: Option<&Volume3>) -> Result<Tensor5<f32>> {
    let [nx, ny, nz] = ct_norm.dims();
    let mut data = ct_norm.data().to_vec();
    if let Some(s) = saliency {
        ct_norm.geometry().ensure_same(s.geometry(), "ct/saliency")?;
        data.extend_from_slice(s.data());
    }
    let c = 1 + saliency.is_some() as usize;
    Tensor5::from_vec([1, c, nz, ny, nx], data)
}

/// Label mask as a `(1, 1, z, y, x)` tensor of 0/1.
pub fn target_tensor(label: &Mask3) -> Result<Tensor5<f32>> {
    let [nx, ny, nz] = label.dims();
    Tensor5::from_vec([1, 1, nz, ny, nx], label.data().iter().map(|&v| v as f32).collect())
}

/// Input for a network with `in_channels` inputs. A CT-only network must
/// not be given a saliency map and a two-channel network needs one.
pub fn network_input(in_channels: usize, ct_norm: &Volume3, saliency: Option<&SaliencyMap>) -> Result<Tensor5<f32>> {
    match (in_channels, saliency) {
        (1, None) => input_tensor(ct_norm, None),
        (1, Some(_)) => Err(Error::InvalidArgument("a CT-only model does not take a saliency map".into())),
        (2, Some(s)) => input_tensor(ct_norm, Some(&s.map)),
        (2, None) => Err(Error::InvalidArgument("this model needs a saliency map".into())),
        (c, _) => Err(Error::InvalidArgument(format!("unsupported input channel count {c}"))),
    }
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub prob: Volume3,
    pub mask: Mask3,
    /// Seconds spent assembling the input and converting the output.
    pub data_seconds: f64,
    /// Seconds spent in the forward pass.
    pub compute_seconds: f64,
}

/// Eval-mode forward pass; the mask is `prob >= threshold`.
pub fn predict(params: &UNetParams<f32>, ct_norm: &Volume3, saliency: Option<&SaliencyMap>, threshold: f32) -> Result<Prediction> {
    let t0 = Instant::now();
    let input = network_input(params.config.in_channels, ct_norm, saliency)?;
    let t1 = Instant::now();
    let out = UNet::new(params).forward_eval(&input)?;
    let t2 = Instant::now();
    let geom = *ct_norm.geometry();
    let prob = Volume3::new(geom, out.into_vec())?;
    let mask = Mask3::new(geom, prob.data().iter().map(|&p| (p >= threshold) as u8).collect())?;
    let t3 = Instant::now();
    Ok(Prediction {
        prob,
        mask,
        data_seconds: (t1 - t0).as_secs_f64() + (t3 - t2).as_secs_f64(),
        compute_seconds: (t2 - t1).as_secs_f64(),
    })
}

/// Voxel foreground iff more than half of the masks vote for it. Exact ties
/// go to the mean probability (`>= 0.5`) when `probs` is given, otherwise
/// to background.
pub fn majority_vote(masks: &[Mask3], probs: Option<&[Volume3]>) -> Result<Mask3> {
    let first = masks.first().ok_or_else(|| Error::Empty("majority vote of no masks".into()))?;
    let g = *first.geometry();
    for m in masks {
        g.ensure_same(m.geometry(), "majority vote")?;
    }
    if let Some(p) = probs {
        if p.len() != masks.len() {
            return Err(Error::InvalidArgument(format!("{} probability maps for {} masks", p.len(), masks.len())));
        }
        for v in p {
            g.ensure_same(v.geometry(), "majority vote probabilities")?;
        }
    }
    let k = masks.len();
    let mut out = vec![0u8; g.len()];
    for (i, o) in out.iter_mut().enumerate() {
        let votes = masks.iter().filter(|m| m.get_flat(i)).count();
        *o = if 2 * votes > k {
            1
        } else if 2 * votes == k {
            match probs {
                Some(p) => {
                    let mean = p.iter().map(|v| v.data()[i] as f64).sum::<f64>() / k as f64;
                    (mean >= 0.5) as u8
                }
                None => 0,
            }
        } else {
            0
        };
    }
    Mask3::new(g, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;

    fn g() -> Geometry {
        Geometry::unit([2, 1, 1]).unwrap()
    }

    fn m(a: u8, b: u8) -> Mask3 {
        Mask3::new(g(), vec![a, b]).unwrap()
    }

    fn p(a: f32, b: f32) -> Volume3 {
        Volume3::new(g(), vec![a, b]).unwrap()
    }

    #[test]
    fn counting_and_ties() {
        let masks = [m(1, 1), m(1, 0), m(1, 1), m(0, 0)];
        // voxel 0: 3-1, voxel 1: 2-2
        let hi = [p(0.9, 0.9), p(0.9, 0.3), p(0.9, 0.9), p(0.1, 0.3)];
        let lo = [p(0.9, 0.6), p(0.9, 0.2), p(0.9, 0.6), p(0.1, 0.2)];
        assert_eq!(majority_vote(&masks, Some(&hi)).unwrap(), m(1, 1));
        assert_eq!(majority_vote(&masks, Some(&lo)).unwrap(), m(1, 0));
        assert_eq!(majority_vote(&masks, None).unwrap(), m(1, 0));
    }

    #[test]
    fn unanimity_and_errors() {
        assert_eq!(majority_vote(&[m(0, 1), m(0, 1), m(0, 1)], None).unwrap(), m(0, 1));
        assert!(majority_vote(&[], None).is_err());
        let other = Mask3::zeros(Geometry::unit([1, 2, 1]).unwrap()).unwrap();
        assert!(matches!(majority_vote(&[m(0, 1), other], None), Err(Error::Geometry(_))));
    }

    #[test]
    fn input_channel_contract() {
        let ct = Volume3::filled(Geometry::unit([2, 2, 2]).unwrap(), 0.5).unwrap();
        let s = SaliencyMap::empty(*ct.geometry()).unwrap();
        assert_eq!(network_input(1, &ct, None).unwrap().shape(), [1, 1, 2, 2, 2]);
        assert!(network_input(1, &ct, Some(&s)).is_err());
        assert!(network_input(2, &ct, None).is_err());
        assert_eq!(network_input(2, &ct, Some(&s)).unwrap().shape(), [1, 2, 2, 2, 2]);
    }
}
