use super::check_upstream;
use crate::{Error, Real, Result, Tensor};

#[derive(Clone, Debug)]
pub struct DenseCache<T> {
    x: Tensor<T>,
    weights: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct DenseGrads<T> {
    pub dx: Tensor<T>,
    pub dweights: Tensor<T>,
    pub dbias: Tensor<T>,
}

fn dims2(t: &Tensor<impl Real>, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        &[a, b] => Ok((a, b)),
        other => Err(Error::Shape(format!("{what}: expected rank 2, got {other:?}"))),
    }
}

/// `y = x·W + b` with `x: [N,F]`, `W: [F,G]`, `b: [G]`.
pub fn dense_forward<T: Real>(x: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<(Tensor<T>, DenseCache<T>)> {
    let (n, f) = dims2(x, "dense input")?;
    let (wf, g) = dims2(weights, "dense weights")?;
    if wf != f {
        return Err(Error::Shape(format!(
            "dense: input has {f} features (axis 1) but weights expect {wf}"
        )));
    }
    bias.expect_shape(&[g], "dense bias")?;
    let (xs, ws) = (x.data(), weights.data());
    let mut y = Vec::with_capacity(n * g);
    for ni in 0..n {
        let mut row = bias.data().to_vec();
        for (fi, &xv) in xs[ni * f..][..f].iter().enumerate() {
            row.iter_mut()
                .zip(&ws[fi * g..][..g])
                .for_each(|(o, &wv)| *o = *o + xv * wv);
        }
        y.extend(row);
    }
    Ok((
        Tensor::new(&[n, g], y)?,
        DenseCache {
            x: x.clone(),
            weights: weights.clone(),
        },
    ))
}

pub fn dense_backward<T: Real>(cache: &DenseCache<T>, dy: &Tensor<T>) -> Result<DenseGrads<T>> {
    let (n, f) = dims2(&cache.x, "dense cache")?;
    let (_, g) = dims2(&cache.weights, "dense cache")?;
    check_upstream(dy, &[n, g], "dense")?;
    let (xs, ws, gs) = (cache.x.data(), cache.weights.data(), dy.data());

    let mut dx = vec![T::zero(); n * f];
    let mut dw = vec![T::zero(); f * g];
    let mut db = vec![T::zero(); g];
    for ni in 0..n {
        let grow = &gs[ni * g..][..g];
        db.iter_mut().zip(grow).for_each(|(o, &v)| *o = *o + v);
        for fi in 0..f {
            let xv = xs[ni * f + fi];
            let wrow = &ws[fi * g..][..g];
            let dwrow = &mut dw[fi * g..][..g];
            let mut acc = T::zero();
            for gi in 0..g {
                dwrow[gi] = dwrow[gi] + xv * grow[gi];
                acc = acc + wrow[gi] * grow[gi];
            }
            dx[ni * f + fi] = acc;
        }
    }
    Ok(DenseGrads {
        dx: Tensor::new(&[n, f], dx)?,
        dweights: Tensor::new(&[f, g], dw)?,
        dbias: Tensor::new(&[g], db)?,
    })
}
