use crate::encoders::{ConnectorParams, PIXEL_CHANNELS};
use crate::error::{Error, Result};

use super::{image_slot, log_softmax, logits_with_hidden, tail_vector, EncodedInput, PolicyParams};

/// Gradient over the trainable parameters only. There is no slot for the
/// base head or the token embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGrad {
    pub connectors: ConnectorParams,
    pub lora_b: Vec<f64>,
    pub lora_a: Vec<f64>,
}

const BLOCK_NAMES: [&str; 6] = ["disease_weight", "disease_bias", "pixel_weight", "pixel_bias", "lora_b", "lora_a"];

impl PolicyGrad {
    pub fn zeros(params: &PolicyParams) -> Self {
        let c = &params.connectors;
        Self {
            connectors: ConnectorParams::zeros(c.d_e, c.channels, c.d_m),
            lora_b: vec![0.0; params.lora_b.len()],
            lora_a: vec![0.0; params.lora_a.len()],
        }
    }

    pub fn blocks(&self) -> [&[f64]; 6] {
        let c = &self.connectors;
        [&c.disease_weight, &c.disease_bias, &c.pixel_weight, &c.pixel_bias, &self.lora_b, &self.lora_a]
    }

    fn blocks_mut(&mut self) -> [&mut [f64]; 6] {
        let c = &mut self.connectors;
        [&mut c.disease_weight, &mut c.disease_bias, &mut c.pixel_weight, &mut c.pixel_bias, &mut self.lora_b, &mut self.lora_a]
    }

    /// Same ordering as [`PolicyParams::trainable_flat`].
    pub fn flat(&self) -> Vec<f64> {
        self.blocks().iter().flat_map(|b| b.iter().copied()).collect()
    }

    pub fn add_assign(&mut self, other: &PolicyGrad) {
        for (a, b) in self.blocks_mut().into_iter().zip(other.blocks()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for block in self.blocks_mut() {
            block.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn norm(&self) -> f64 {
        self.blocks().iter().flat_map(|b| b.iter()).map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, block) in BLOCK_NAMES.iter().zip(self.blocks()) {
            if let Some(i) = block.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("gradient {name}[{i}]")));
            }
        }
        Ok(())
    }
}

/// Adds the gradient of a loss with per-step logit gradients `dlogits`
/// (one vocabulary-sized vector per token of `tokens`) into `grad`.
pub fn sequence_backward(
    params: &PolicyParams,
    input: &EncodedInput,
    tokens: &[usize],
    dlogits: &[Vec<f64>],
    grad: &mut PolicyGrad,
) -> Result<()> {
    if dlogits.len() != tokens.len() {
        return Err(Error::Dimension(format!("{} logit gradients for {} tokens", dlogits.len(), tokens.len())));
    }
    let dims = params.dims;
    let (v, r, d_m) = (dims.vocab, dims.rank, dims.d_m);
    let s = params.lora_scale();
    let image = image_slot(params, input)?;
    let mut d_image = vec![0.0; image.len()];
    let mut ga = vec![0.0; r];
    let mut prev = 0;

    for (t, (&tok, g)) in tokens.iter().zip(dlogits).enumerate() {
        let tail = tail_vector(params, input, prev);
        prev = tok;
        if g.iter().all(|&x| x == 0.0) {
            continue;
        }
        let (_, hidden) = logits_with_hidden(params, t, &image, &tail);
        for (k, &u) in hidden.iter().enumerate() {
            let a_row = &params.lora_a[k * v..(k + 1) * v];
            ga[k] = s * a_row.iter().zip(g).map(|(a, gj)| a * gj).sum::<f64>();
            if u != 0.0 {
                for (da, gj) in grad.lora_a[k * v..(k + 1) * v].iter_mut().zip(g) {
                    *da += s * u * gj;
                }
            }
        }
        let slot_rows = t * dims.slot_width();
        for (i, &x) in image.iter().enumerate() {
            let row = slot_rows + i;
            let w_row = &params.base[row * v..(row + 1) * v];
            let b_row = &params.lora_b[row * r..(row + 1) * r];
            d_image[i] += w_row.iter().zip(g).map(|(w, gj)| w * gj).sum::<f64>() + b_row.iter().zip(&ga).map(|(b, a)| b * a).sum::<f64>();
            if x != 0.0 {
                for (db, a) in grad.lora_b[row * r..(row + 1) * r].iter_mut().zip(&ga) {
                    *db += x * a;
                }
            }
        }
        for (i, &x) in tail.iter().enumerate() {
            if x != 0.0 {
                let row = dims.tail_offset() + i;
                for (db, a) in grad.lora_b[row * r..(row + 1) * r].iter_mut().zip(&ga) {
                    *db += x * a;
                }
            }
        }
    }

    let c = &mut grad.connectors;
    let e = &input.disease.0;
    for (i, &de) in d_image[..d_m].iter().enumerate() {
        c.disease_bias[i] += de;
        for (w, ej) in c.disease_weight[i * e.len()..(i + 1) * e.len()].iter_mut().zip(e) {
            *w += de * ej;
        }
    }
    for (cell, dp) in input.pixel.data.chunks_exact(PIXEL_CHANNELS).zip(d_image[d_m..].chunks_exact(d_m)) {
        for (i, &dpi) in dp.iter().enumerate() {
            c.pixel_bias[i] += dpi;
            for (w, pk) in c.pixel_weight[i * PIXEL_CHANNELS..(i + 1) * PIXEL_CHANNELS].iter_mut().zip(cell) {
                *w += dpi * pk;
            }
        }
    }
    Ok(())
}

/// Per-step log-distributions under teacher forcing, for objectives that
/// need the full distribution to form `dlogits`.
pub(crate) fn step_log_distributions(params: &PolicyParams, input: &EncodedInput, tokens: &[usize]) -> Result<Vec<Vec<f64>>> {
    super::check_tokens(params, tokens)?;
    let image = image_slot(params, input)?;
    let mut prev = 0;
    Ok(tokens
        .iter()
        .enumerate()
        .map(|(t, &tok)| {
            let lp = log_softmax(&logits_with_hidden(params, t, &image, &tail_vector(params, input, prev)).0);
            prev = tok;
            lp
        })
        .collect())
}

/// A differentiable scalar function of the policy parameters.
pub trait Objective {
    /// Returns the loss and adds its gradient into `grad`.
    fn loss_and_grad(&self, params: &PolicyParams, grad: &mut PolicyGrad) -> Result<f64>;

    fn loss(&self, params: &PolicyParams) -> Result<f64> {
        let mut scratch = PolicyGrad::zeros(params);
        self.loss_and_grad(params, &mut scratch)
    }
}

/// Analytic gradient of `objective` with respect to the trainable parameters.
pub fn grad_trainable<O: Objective + ?Sized>(params: &PolicyParams, objective: &O) -> Result<(f64, PolicyGrad)> {
    let mut grad = PolicyGrad::zeros(params);
    let loss = objective.loss_and_grad(params, &mut grad)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    grad.check_finite()?;
    Ok((loss, grad))
}
