//! Frozen feature extractors and the two trainable connectors.
//!
//! The disease-level encoder pools the whole image into a fixed vector of
//! global statistics. The pixel-level encoder keeps one feature vector per
//! patch. Neither has parameters; only the connectors learn.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::GridImage;
use crate::error::{Error, Result};
use crate::seed::Rng;

/// Width of the disease-level embedding.
pub const DISEASE_DIM: usize = 12;
/// Per-patch channels: mean, max, variance.
pub const PIXEL_CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct DiseaseEmbedding(pub Vec<f64>);

#[derive(Debug, Clone, PartialEq)]
pub struct PixelFeatureMap {
    pub rows: usize,
    pub cols: usize,
    /// `rows * cols` cells, each `PIXEL_CHANNELS` wide, row-major.
    pub data: Vec<f64>,
}

impl PixelFeatureMap {
    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let i = (row * self.cols + col) * PIXEL_CHANNELS;
        &self.data[i..i + PIXEL_CHANNELS]
    }
}

fn mean_var(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Global statistics: mean and variance, the four quadrant means, peak and
/// variance of the row and column mean profiles, and the mean of the row-wise
/// and column-wise maxima.
pub fn encode_disease(image: &GridImage) -> DiseaseEmbedding {
    let (h, w) = (image.height(), image.width());
    let data = image.data();
    let (mean, var) = mean_var(data.iter().copied());

    let quadrant = |r0: usize, r1: usize, c0: usize, c1: usize| {
        let mut sum = 0.0;
        for r in r0..r1 {
            sum += data[r * w + c0..r * w + c1].iter().sum::<f64>();
        }
        sum / ((r1 - r0) * (c1 - c0)) as f64
    };
    let (hm, wm) = (h / 2, w / 2);

    let row_means: Vec<f64> = (0..h).map(|r| data[r * w..(r + 1) * w].iter().sum::<f64>() / w as f64).collect();
    let col_means: Vec<f64> = (0..w).map(|c| (0..h).map(|r| data[r * w + c]).sum::<f64>() / h as f64).collect();
    let row_max_mean = (0..h).map(|r| data[r * w..(r + 1) * w].iter().copied().fold(0.0, f64::max)).sum::<f64>() / h as f64;
    let col_max_mean = (0..w).map(|c| (0..h).map(|r| data[r * w + c]).fold(0.0, f64::max)).sum::<f64>() / w as f64;

    DiseaseEmbedding(vec![
        mean,
        var,
        quadrant(0, hm, 0, wm),
        quadrant(0, hm, wm, w),
        quadrant(hm, h, 0, wm),
        quadrant(hm, h, wm, w),
        row_means.iter().copied().fold(0.0, f64::max),
        col_means.iter().copied().fold(0.0, f64::max),
        mean_var(row_means.iter().copied()).1,
        mean_var(col_means.iter().copied()).1,
        row_max_mean,
        col_max_mean,
    ])
}

/// Per-patch mean, max and variance over non-overlapping `patch`×`patch` tiles.
pub fn encode_pixel(image: &GridImage, patch: usize) -> Result<PixelFeatureMap> {
    let (h, w) = (image.height(), image.width());
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Config(format!("encoder.patch: {h}x{w} image is not divisible into {patch}x{patch} patches")));
    }
    let (rows, cols) = (h / patch, w / patch);
    let mut data = Vec::with_capacity(rows * cols * PIXEL_CHANNELS);
    for pr in 0..rows {
        for pc in 0..cols {
            let cells = (0..patch).flat_map(|r| (0..patch).map(move |c| (pr * patch + r, pc * patch + c)));
            let values = cells.map(|(r, c)| image.get(r, c));
            let (mean, var) = mean_var(values.clone());
            data.extend([mean, values.fold(0.0, f64::max), var]);
        }
    }
    Ok(PixelFeatureMap { rows, cols, data })
}

/// Affine projections into the policy's embedding width: `W_d e + b_d` for
/// the global vector and `W_p p_c + b_p` applied to every pixel cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnectorParams {
    pub d_e: usize,
    pub channels: usize,
    pub d_m: usize,
    /// `d_m × d_e`, row-major.
    pub disease_weight: Vec<f64>,
    pub disease_bias: Vec<f64>,
    /// `d_m × channels`, row-major.
    pub pixel_weight: Vec<f64>,
    pub pixel_bias: Vec<f64>,
}

impl ConnectorParams {
    pub fn zeros(d_e: usize, channels: usize, d_m: usize) -> Self {
        Self {
            d_e,
            channels,
            d_m,
            disease_weight: vec![0.0; d_m * d_e],
            disease_bias: vec![0.0; d_m],
            pixel_weight: vec![0.0; d_m * channels],
            pixel_bias: vec![0.0; d_m],
        }
    }

    /// Gaussian weights with standard deviation `scale`, zero biases.
    pub fn random(d_e: usize, channels: usize, d_m: usize, scale: f64, rng: &mut Rng) -> Self {
        let mut p = Self::zeros(d_e, channels, d_m);
        for v in p.disease_weight.iter_mut().chain(p.pixel_weight.iter_mut()) {
            *v = scale * rng.sample::<f64, _>(StandardNormal);
        }
        p
    }

    pub fn num_params(&self) -> usize {
        self.disease_weight.len() + self.disease_bias.len() + self.pixel_weight.len() + self.pixel_bias.len()
    }
}

/// Connector outputs: `ê` followed by the projected cells of `p̂`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedFeatures {
    pub disease: Vec<f64>,
    /// `cells × d_m`, row-major.
    pub pixel: Vec<f64>,
}

fn affine(weight: &[f64], bias: &[f64], input: &[f64], out: &mut [f64]) {
    let cols = input.len();
    for (o, (row, b)) in out.iter_mut().zip(weight.chunks_exact(cols).zip(bias)) {
        *o = b + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>();
    }
}

pub fn apply_connectors(e: &DiseaseEmbedding, p: &PixelFeatureMap, params: &ConnectorParams) -> Result<ProjectedFeatures> {
    if e.0.len() != params.d_e {
        return Err(Error::Dimension(format!("disease embedding has {} entries, connector expects {}", e.0.len(), params.d_e)));
    }
    if params.channels != PIXEL_CHANNELS {
        return Err(Error::Dimension(format!("pixel map has {PIXEL_CHANNELS} channels, connector expects {}", params.channels)));
    }
    let d_m = params.d_m;
    let mut disease = vec![0.0; d_m];
    affine(&params.disease_weight, &params.disease_bias, &e.0, &mut disease);
    let mut pixel = vec![0.0; p.cells() * d_m];
    for (cell, out) in p.data.chunks_exact(PIXEL_CHANNELS).zip(pixel.chunks_exact_mut(d_m)) {
        affine(&params.pixel_weight, &params.pixel_bias, cell, out);
    }
    Ok(ProjectedFeatures { disease, pixel })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn image_with(h: usize, w: usize, cells: &[(usize, usize)]) -> GridImage {
        let mut data = vec![0.0; h * w];
        for &(r, c) in cells {
            data[r * w + c] = 1.0;
        }
        GridImage::new(h, w, data).unwrap()
    }

    #[test]
    fn disease_constant_images() {
        let zero = encode_disease(&GridImage::zeros(8, 8).unwrap());
        assert!(zero.0.iter().all(|&v| v == 0.0));
        assert_eq!(zero.0.len(), DISEASE_DIM);
        let ones = encode_disease(&GridImage::new(8, 8, vec![1.0; 64]).unwrap());
        assert_eq!(ones.0[0], 1.0);
        assert_eq!(ones.0[1], 0.0);
    }

    #[test]
    fn disease_mean_of_small_square() {
        let img = image_with(8, 8, &[(0, 0), (0, 1), (1, 0), (1, 1)]);
        let direct: f64 = img.data().iter().sum::<f64>() / 64.0;
        let e = encode_disease(&img);
        assert_eq!(e.0[0], direct);
        assert_eq!(e.0[0], 0.0625);
        // the whole square lies in the top-left quadrant
        assert_eq!(e.0[2], 4.0 / 16.0);
        assert_eq!(&e.0[3..6], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn pixel_zero_and_locality() {
        let zero = encode_pixel(&GridImage::zeros(8, 8).unwrap(), 4).unwrap();
        assert!(zero.data.iter().all(|&v| v == 0.0));
        let img = image_with(8, 8, &[(5, 6)]);
        let map = encode_pixel(&img, 4).unwrap();
        let nonzero: Vec<_> = (0..2).flat_map(|r| (0..2).map(move |c| (r, c))).filter(|&(r, c)| map.cell(r, c)[0] != 0.0).collect();
        assert_eq!(nonzero, vec![(1, 1)]);
    }

    #[test]
    fn pixel_patch_mean_is_covered_fraction() {
        let square: Vec<_> = (0..3).flat_map(|r| (0..3).map(move |c| (r, c))).collect();
        let map = encode_pixel(&image_with(8, 8, &square), 4).unwrap();
        assert_eq!(map.cell(0, 0)[0], 9.0 / 16.0);
        assert_eq!(map.cell(0, 0)[1], 1.0);
        assert!((map.cell(0, 0)[2] - (9.0 / 16.0) * (7.0 / 16.0)).abs() < 1e-15);
    }

    #[test]
    fn pixel_rejects_indivisible() {
        assert!(matches!(encode_pixel(&GridImage::zeros(10, 8).unwrap(), 4), Err(Error::Config(_))));
    }

    #[test]
    fn zero_and_identity_connectors() {
        let img = image_with(8, 8, &[(1, 1), (6, 2)]);
        let (e, p) = (encode_disease(&img), encode_pixel(&img, 4).unwrap());
        let zero = apply_connectors(&e, &p, &ConnectorParams::zeros(DISEASE_DIM, 3, 16)).unwrap();
        assert!(zero.disease.iter().chain(&zero.pixel).all(|&v| v == 0.0));

        let mut id = ConnectorParams::zeros(DISEASE_DIM, 3, DISEASE_DIM);
        for i in 0..DISEASE_DIM {
            id.disease_weight[i * DISEASE_DIM + i] = 1.0;
        }
        assert_eq!(apply_connectors(&e, &p, &id).unwrap().disease, e.0);
        assert!(apply_connectors(&e, &p, &ConnectorParams::zeros(5, 3, 16)).is_err());
    }

    #[test]
    fn connectors_are_linear_without_bias() {
        let mut rng = seed::rng(4);
        let params = ConnectorParams::random(DISEASE_DIM, 3, 16, 1.0, &mut rng);
        let e1 = DiseaseEmbedding((0..12).map(|i| (i as f64).sin()).collect());
        let e2 = DiseaseEmbedding((0..12).map(|i| (i as f64 * 0.7).cos()).collect());
        let p1 = PixelFeatureMap { rows: 2, cols: 2, data: (0..12).map(|i| i as f64 / 12.0).collect() };
        let p2 = PixelFeatureMap { rows: 2, cols: 2, data: (0..12).map(|i| 1.0 - i as f64 / 7.0).collect() };
        let (a, b) = (0.3, -1.7);
        let mix_e = DiseaseEmbedding(e1.0.iter().zip(&e2.0).map(|(x, y)| a * x + b * y).collect());
        let mix_p = PixelFeatureMap { rows: 2, cols: 2, data: p1.data.iter().zip(&p2.data).map(|(x, y)| a * x + b * y).collect() };
        let o1 = apply_connectors(&e1, &p1, &params).unwrap();
        let o2 = apply_connectors(&e2, &p2, &params).unwrap();
        let om = apply_connectors(&mix_e, &mix_p, &params).unwrap();
        for ((m, x), y) in om.disease.iter().zip(&o1.disease).zip(&o2.disease) {
            assert!((m - (a * x + b * y)).abs() < 1e-12);
        }
        for ((m, x), y) in om.pixel.iter().zip(&o1.pixel).zip(&o2.pixel) {
            assert!((m - (a * x + b * y)).abs() < 1e-12);
        }
    }

    #[test]
    fn connector_jacobian_matches_finite_differences() {
        let mut rng = seed::rng(11);
        let params = ConnectorParams::random(DISEASE_DIM, 3, 16, 0.5, &mut rng);
        let e = DiseaseEmbedding((0..12).map(|i| 0.1 * i as f64 - 0.4).collect());
        let p = PixelFeatureMap { rows: 2, cols: 2, data: (0..12).map(|i| (i as f64).sqrt() / 4.0).collect() };
        let h = 1e-5;
        // d ê_i / d W_d[i][j] = e_j ; d p̂_{c,i} / d W_p[i][k] = p_{c,k}
        for (idx, _) in params.disease_weight.iter().enumerate() {
            let (i, j) = (idx / 12, idx % 12);
            let mut plus = params.clone();
            let mut minus = params.clone();
            plus.disease_weight[idx] += h;
            minus.disease_weight[idx] -= h;
            let fd =
                (apply_connectors(&e, &p, &plus).unwrap().disease[i] - apply_connectors(&e, &p, &minus).unwrap().disease[i]) / (2.0 * h);
            let analytic = e.0[j];
            assert!((fd - analytic).abs() <= 1e-5 * analytic.abs().max(1e-3), "{fd} vs {analytic}");
        }
        for (idx, _) in params.pixel_weight.iter().enumerate() {
            let (i, k) = (idx / 3, idx % 3);
            for cell in 0..4 {
                let mut plus = params.clone();
                let mut minus = params.clone();
                plus.pixel_weight[idx] += h;
                minus.pixel_weight[idx] -= h;
                let fd = (apply_connectors(&e, &p, &plus).unwrap().pixel[cell * 16 + i]
                    - apply_connectors(&e, &p, &minus).unwrap().pixel[cell * 16 + i])
                    / (2.0 * h);
                let analytic = p.data[cell * 3 + k];
                assert!((fd - analytic).abs() <= 1e-5 * analytic.abs().max(1e-3), "{fd} vs {analytic}");
            }
        }
    }
}
