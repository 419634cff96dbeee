use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::interventions::by_length;
use crate::model::{forward_batch, Components, RoutedLm};
use crate::numerics::{Scalar, Tensor};

fn centered<T: Scalar>(x: &Tensor<T>) -> DMatrix<f64> {
    let (n, d) = (x.rows(), x.cols());
    let mut m = DMatrix::from_fn(n, d, |i, j| x.at2(i, j).as_f64());
    for j in 0..d {
        let mean = m.column(j).sum() / n as f64;
        m.column_mut(j).add_scalar_mut(-mean);
    }
    m
}

/// Linear CKA between two activation matrices sharing their row count.
pub fn linear_cka<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.rows() != b.rows() {
        return Err(Error::shape("linear_cka", a.shape(), b.shape()));
    }
    if a.rows() < 2 {
        return Err(Error::Input("linear CKA needs at least two rows".into()));
    }
    let (x, y) = (centered(a), centered(b));
    let xx = (x.transpose() * &x).norm();
    let yy = (y.transpose() * &y).norm();
    if xx == 0.0 || yy == 0.0 {
        return Err(Error::Undefined("linear CKA of a zero-variance input".into()));
    }
    let xy = (x.transpose() * &y).norm_squared();
    // bounded by Cauchy-Schwarz; clamp rounding overshoot
    Ok((xy / (xx * yy)).clamp(0.0, 1.0))
}

/// Post-block residual streams per layer, positions of all sequences
/// stacked as rows.
pub fn residual_streams<T: Scalar>(model: &RoutedLm<T>, seqs: &[Vec<u32>]) -> Result<Vec<Tensor<f64>>> {
    let (l, d) = (model.config.n_layers, model.config.d_model);
    let mut rows: Vec<Vec<f64>> = vec![Vec::new(); l];
    let mut order: Vec<(usize, Vec<Vec<f64>>)> = Vec::new();
    for group in by_length(seqs, 16) {
        let batch: Vec<&[u32]> = group.iter().map(|&i| &seqs[i][..]).collect();
        let out = forward_batch(model, &batch, None, &Components::default(), true)?;
        for (&i, tr) in group.iter().zip(out.traces.expect("trace requested")) {
            order.push((i, tr.layers.iter().map(|lt| lt.residual_out.data().iter().map(|x| x.as_f64()).collect()).collect()));
        }
    }
    order.sort_by_key(|(i, _)| *i);
    for (_, layers) in order {
        for (li, v) in layers.into_iter().enumerate() {
            rows[li].extend(v);
        }
    }
    rows.into_iter()
        .map(|r| {
            let n = r.len() / d;
            Tensor::new([n, d], r)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerCka {
    pub positions: usize,
    pub per_layer: Vec<f64>,
}

/// Per-layer CKA between the residual streams of two models on the same
/// sequences.
pub fn layer_cka<A: Scalar, B: Scalar>(a: &RoutedLm<A>, b: &RoutedLm<B>, seqs: &[Vec<u32>]) -> Result<LayerCka> {
    if a.config.n_layers != b.config.n_layers {
        return Err(Error::Contract("models differ in depth".into()));
    }
    let (ra, rb) = (residual_streams(a, seqs)?, residual_streams(b, seqs)?);
    let positions = ra.first().map_or(0, |t| t.rows());
    let per_layer = ra.iter().zip(&rb).map(|(x, y)| linear_cka(x, y)).collect::<Result<_>>()?;
    Ok(LayerCka { positions, per_layer })
}
