use crate::survloss::ExpandedDataset;

/// Per-covariate z-scores fitted on a training sample.
///
/// Time-varying covariates use every observed sensor reading (before masking),
/// static covariates use one value per subject. Masked positions stay 0 after
/// scaling, i.e. at the training mean.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub tv_mean: Vec<f64>,
    pub tv_sd: Vec<f64>,
    pub ti_mean: Vec<f64>,
    pub ti_sd: Vec<f64>,
}

fn moments(sum: f64, sum_sq: f64, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let mean = sum / n as f64;
    let var = (sum_sq / n as f64 - mean * mean).max(0.0);
    let sd = var.sqrt();
    (mean, if sd > 1e-12 { sd } else { 1.0 })
}

impl Standardizer {
    pub fn identity(tv_dim: usize, ti_dim: usize) -> Self {
        Self {
            tv_mean: vec![0.0; tv_dim],
            tv_sd: vec![1.0; tv_dim],
            ti_mean: vec![0.0; ti_dim],
            ti_sd: vec![1.0; ti_dim],
        }
    }

    pub fn fit(data: &ExpandedDataset) -> Self {
        let d = data.tv_dim;
        let mut out = Self::identity(d, data.ti_dim);
        for c in 0..d {
            let (mut s, mut s2, mut n) = (0.0, 0.0, 0);
            for subj in &data.subjects {
                for k in 0..subj.observed {
                    let v = subj.sensors[k * d + c];
                    s += v;
                    s2 += v * v;
                    n += 1;
                }
            }
            (out.tv_mean[c], out.tv_sd[c]) = moments(s, s2, n);
        }
        for c in 0..data.ti_dim {
            let (mut s, mut s2) = (0.0, 0.0);
            for subj in &data.subjects {
                s += subj.statics[c];
                s2 += subj.statics[c] * subj.statics[c];
            }
            (out.ti_mean[c], out.ti_sd[c]) = moments(s, s2, data.subjects.len());
        }
        out
    }

    /// Scales the first `count` positions of a position-major sensor block.
    pub fn scale_sensors(&self, sensors: &mut [f64], count: usize) {
        let d = self.tv_mean.len();
        for k in 0..count {
            for c in 0..d {
                let v = &mut sensors[k * d + c];
                *v = (*v - self.tv_mean[c]) / self.tv_sd[c];
            }
        }
    }

    pub fn scale_statics(&self, statics: &mut [f64]) {
        for (c, v) in statics.iter_mut().enumerate() {
            *v = (*v - self.ti_mean[c]) / self.ti_sd[c];
        }
    }

    pub fn apply(&self, data: &ExpandedDataset) -> ExpandedDataset {
        let mut out = data.clone();
        for subj in &mut out.subjects {
            self.scale_sensors(&mut subj.sensors, subj.observed);
            self.scale_statics(&mut subj.statics);
        }
        out
    }
}
