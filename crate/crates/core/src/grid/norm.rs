use super::{FeatureGrid, Real};
use crate::error::{Error, Result};

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Per-(sample, group) statistics kept for the backward pass.
#[derive(Clone, Debug)]
pub struct GroupNormCache<T> {
    /// Normalized input before the affine transform.
    pub normalized: FeatureGrid<T>,
    /// `1 / sqrt(var + eps)` per `(sample, group)`, sample-major.
    pub inv_std: Vec<T>,
}

#[derive(Debug)]
pub struct GroupNormGrads<T> {
    pub input: FeatureGrid<T>,
    pub gamma: FeatureGrid<T>,
    pub beta: FeatureGrid<T>,
}

fn check<T: Real>(
    input: &FeatureGrid<T>,
    groups: usize,
    gamma: &FeatureGrid<T>,
    beta: &FeatureGrid<T>,
) -> Result<usize> {
    let c = input.channels();
    if groups == 0 || !c.is_multiple_of(groups) {
        return Err(Error::Config(format!(
            "group_norm: {c} channels not divisible into {groups} groups"
        )));
    }
    if gamma.numel() != c || beta.numel() != c {
        return Err(crate::error::shape_err!(
            "group_norm: affine params must have {c} entries"
        ));
    }
    Ok(c / groups)
}

/// Group normalization over `(channels-in-group, H, W)` per sample, followed
/// by a per-channel affine transform.
pub fn group_norm<T: Real>(
    input: &FeatureGrid<T>,
    groups: usize,
    gamma: &FeatureGrid<T>,
    beta: &FeatureGrid<T>,
) -> Result<(FeatureGrid<T>, GroupNormCache<T>)> {
    let per_group = check(input, groups, gamma, beta)?;
    let [n, _, h, w] = input.shape();
    let hw = h * w;
    let len = per_group * hw;
    let eps = T::lit(GROUP_NORM_EPS);
    let mut normalized = FeatureGrid::zeros(input.shape());
    let mut out = FeatureGrid::zeros(input.shape());
    let mut inv_std = Vec::with_capacity(n * groups);
    let count = T::from_usize(len).unwrap();
    for (gi, (src, dst)) in input
        .data()
        .chunks(len)
        .zip(normalized.data_mut().chunks_mut(len))
        .enumerate()
    {
        let mean = src.iter().fold(T::zero(), |a, &v| a + v) / count;
        let var = src
            .iter()
            .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
            / count;
        let rstd = (var + eps).sqrt().recip();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - mean) * rstd;
        }
        inv_std.push(rstd);
        let g = gi % groups;
        let b = gi / groups;
        for cc in 0..per_group {
            let ch = g * per_group + cc;
            let (ga, be) = (gamma.data()[ch], beta.data()[ch]);
            let o = out.plane_mut(b, ch);
            for (ov, &nv) in o.iter_mut().zip(&dst[cc * hw..(cc + 1) * hw]) {
                *ov = nv * ga + be;
            }
        }
    }
    Ok((out, GroupNormCache { normalized, inv_std }))
}

/// Vector-Jacobian product of [`group_norm`].
pub fn group_norm_backward<T: Real>(
    grad_out: &FeatureGrid<T>,
    cache: &GroupNormCache<T>,
    groups: usize,
    gamma: &FeatureGrid<T>,
) -> GroupNormGrads<T> {
    let [n, c, h, w] = grad_out.shape();
    let hw = h * w;
    let per_group = c / groups;
    let len = per_group * hw;
    let count = T::from_usize(len).unwrap();
    let mut dgamma = FeatureGrid::zeros([1, c, 1, 1]);
    let mut dbeta = FeatureGrid::zeros([1, c, 1, 1]);
    let mut dinput = FeatureGrid::zeros(grad_out.shape());
    let mut dxhat = vec![T::zero(); len];
    for b in 0..n {
        for g in 0..groups {
            let gi = b * groups + g;
            let mut sum_d = T::zero();
            let mut sum_dx = T::zero();
            for cc in 0..per_group {
                let ch = g * per_group + cc;
                let dy = grad_out.plane(b, ch);
                let xh = cache.normalized.plane(b, ch);
                let ga = gamma.data()[ch];
                let mut dg = T::zero();
                let mut db = T::zero();
                for i in 0..hw {
                    dg = dg + dy[i] * xh[i];
                    db = db + dy[i];
                    let d = dy[i] * ga;
                    dxhat[cc * hw + i] = d;
                    sum_d = sum_d + d;
                    sum_dx = sum_dx + d * xh[i];
                }
                dgamma.data_mut()[ch] = dgamma.data()[ch] + dg;
                dbeta.data_mut()[ch] = dbeta.data()[ch] + db;
            }
            let mean_d = sum_d / count;
            let mean_dx = sum_dx / count;
            let rstd = cache.inv_std[gi];
            for cc in 0..per_group {
                let ch = g * per_group + cc;
                let xh = cache.normalized.plane(b, ch);
                let dst = dinput.plane_mut(b, ch);
                for i in 0..hw {
                    dst[i] = rstd * (dxhat[cc * hw + i] - mean_d - xh[i] * mean_dx);
                }
            }
        }
    }
    GroupNormGrads {
        input: dinput,
        gamma: dgamma,
        beta: dbeta,
    }
}
