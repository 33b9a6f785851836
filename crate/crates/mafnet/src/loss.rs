//! Training objective: mean-absolute reconstruction error plus a gradient
//! regularizer that compares forward differences along the horizontal,
//! vertical, and spectral axes.
//!
//! Both a pure cube-level form (for reporting and oracles) and a graph form
//! (for backpropagation) are provided; they compute the same quantities.

use crate::cube::HSICube;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::{Scalar, Tensor};

/// Default weight of the gradient term.
pub const LAMBDA_DEFAULT: f64 = 0.01;

/// One evaluated loss with its components.
#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub rec: f64,
    pub grad: f64,
    pub total: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn from_parts(rec: f64, grad: f64, lambda: f64) -> Self {
        LossBreakdown {
            rec,
            grad,
            total: rec + lambda * grad,
            lambda,
        }
    }
}

fn check_same_shape(a: &HSICube, b: &HSICube) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "cube shapes differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Forward differences along horizontal, vertical, and spectral axes, in
/// that order. The trailing slice of each axis is zero, so outputs keep the
/// input shape. Any axis of length 1 is an error.
pub fn spatial_spectral_gradients(cube: &HSICube) -> Result<[Tensor<f32>; 3]> {
    let (b, h, w) = cube.dims();
    for (n, axis) in [(w, "horizontal"), (h, "vertical"), (b, "spectral")] {
        if n < 2 {
            return Err(Error::Shape(format!(
                "{axis} gradient needs axis length >= 2, got {n}"
            )));
        }
    }
    let src = cube.data();
    let idx = |bb: usize, i: usize, j: usize| (bb * h + i) * w + j;
    let mut gh = Tensor::zeros(&[b, h, w]);
    let mut gv = Tensor::zeros(&[b, h, w]);
    let mut gs = Tensor::zeros(&[b, h, w]);
    for bb in 0..b {
        for i in 0..h {
            for j in 0..w {
                let cur = src[idx(bb, i, j)];
                if j + 1 < w {
                    gh.data_mut()[idx(bb, i, j)] = src[idx(bb, i, j + 1)] - cur;
                }
                if i + 1 < h {
                    gv.data_mut()[idx(bb, i, j)] = src[idx(bb, i + 1, j)] - cur;
                }
                if bb + 1 < b {
                    gs.data_mut()[idx(bb, i, j)] = src[idx(bb + 1, i, j)] - cur;
                }
            }
        }
    }
    Ok([gh, gv, gs])
}

/// Mean absolute difference over all voxels.
pub fn rec_loss(est: &HSICube, reference: &HSICube) -> Result<f64> {
    check_same_shape(est, reference)?;
    let acc: f64 = est
        .data()
        .iter()
        .zip(reference.data())
        .map(|(&a, &b)| (a - b).abs() as f64)
        .sum();
    Ok(acc / est.data().len() as f64)
}

/// Sum over the three axes of the per-voxel mean squared difference of
/// forward-difference fields.
pub fn grad_loss(est: &HSICube, reference: &HSICube) -> Result<f64> {
    check_same_shape(est, reference)?;
    let ge = spatial_spectral_gradients(est)?;
    let gr = spatial_spectral_gradients(reference)?;
    let n = est.data().len() as f64;
    let mut total = 0.0;
    for (e, r) in ge.iter().zip(&gr) {
        let acc: f64 = e
            .data()
            .iter()
            .zip(r.data())
            .map(|(&a, &b)| {
                let d = (a - b) as f64;
                d * d
            })
            .sum();
        total += acc / n;
    }
    Ok(total)
}

/// Combined objective `rec + lambda * grad`.
pub fn total_loss(est: &HSICube, reference: &HSICube, lambda: f64) -> Result<LossBreakdown> {
    if lambda < 0.0 {
        return Err(Error::Param(format!("lambda must be >= 0, got {lambda}")));
    }
    let rec = rec_loss(est, reference)?;
    let grad = grad_loss(est, reference)?;
    Ok(LossBreakdown::from_parts(rec, grad, lambda))
}

/// Loss nodes of one graph construction.
pub struct LossNodes {
    pub rec: NodeId,
    pub grad: NodeId,
    pub total: NodeId,
}

/// Build the objective inside a graph; `est` and `target` are `(B,H,W)`
/// nodes of identical shape.
pub fn total_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    est: NodeId,
    target: NodeId,
    lambda: f64,
) -> LossNodes {
    assert!(lambda >= 0.0);
    assert_eq!(g.value(est).shape(), g.value(target).shape());
    let rec = g.l1_loss(est, target);
    let mut grad = None;
    // Axis order: spectral, vertical, horizontal (the sum is symmetric).
    for axis in 0..3 {
        let de = g.forward_diff(est, axis);
        let dt = g.forward_diff(target, axis);
        let term = g.sq_diff_mean(de, dt);
        grad = Some(match grad {
            None => term,
            Some(acc) => g.add(acc, term),
        });
    }
    let grad = grad.unwrap();
    let weighted = g.scale(grad, lambda);
    let total = g.add(rec, weighted);
    LossNodes { rec, grad, total }
}
