//! Shared encoder/decoder pair projecting item embeddings into the common
//! latent space and back.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{LinearGrad, Mlp, MlpCache, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Autoencoder {
    pub encoder: Mlp,
    pub decoder: Mlp,
}

/// Gradient buffers for both halves of an [`Autoencoder`].
#[derive(Debug, Clone, PartialEq)]
pub struct AutoencoderGrads {
    pub encoder: Vec<LinearGrad>,
    pub decoder: Vec<LinearGrad>,
}

impl AutoencoderGrads {
    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.encoder.iter_mut().zip(&other.encoder) {
            a.add_assign(b);
        }
        for (a, b) in self.decoder.iter_mut().zip(&other.decoder) {
            a.add_assign(b);
        }
    }
}

impl Autoencoder {
    /// Encoder `input → hidden[0] → … → latent`, decoder mirrored.
    pub fn new(input_dim: usize, hidden: &[usize], latent_dim: usize, rng: &mut Rng) -> Result<Self> {
        let mut enc_dims = Vec::with_capacity(hidden.len() + 2);
        enc_dims.push(input_dim);
        enc_dims.extend_from_slice(hidden);
        enc_dims.push(latent_dim);
        let dec_dims: Vec<usize> = enc_dims.iter().rev().copied().collect();
        Ok(Self {
            encoder: Mlp::he_uniform(&enc_dims, rng)?,
            decoder: Mlp::he_uniform(&dec_dims, rng)?,
        })
    }

    pub fn from_parts(encoder: Mlp, decoder: Mlp) -> Result<Self> {
        if encoder.out_dim() != decoder.in_dim() {
            return Err(Error::shape("Autoencoder latent", encoder.out_dim(), decoder.in_dim()));
        }
        if decoder.out_dim() != encoder.in_dim() {
            return Err(Error::shape("Autoencoder output", encoder.in_dim(), decoder.out_dim()));
        }
        Ok(Self { encoder, decoder })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.in_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.out_dim()
    }

    pub fn num_params(&self) -> usize {
        self.encoder.num_params() + self.decoder.num_params()
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        self.encoder.forward(x)
    }

    pub fn decode(&self, z_hat: &[f64]) -> Result<Vec<f64>> {
        if z_hat.len() != self.latent_dim() {
            return Err(Error::shape("Autoencoder::decode", self.latent_dim(), z_hat.len()));
        }
        self.decoder.forward(z_hat)
    }

    pub fn encode_cached(&self, x: &[f64]) -> Result<MlpCache> {
        self.check_input(x)?;
        self.encoder.forward_cached(x)
    }

    pub fn decode_cached(&self, z_hat: &[f64]) -> Result<MlpCache> {
        if z_hat.len() != self.latent_dim() {
            return Err(Error::shape("Autoencoder::decode", self.latent_dim(), z_hat.len()));
        }
        self.decoder.forward_cached(z_hat)
    }

    pub fn zero_grads(&self) -> AutoencoderGrads {
        AutoencoderGrads {
            encoder: self.encoder.zero_grads(),
            decoder: self.decoder.zero_grads(),
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::shape("Autoencoder::encode", self.input_dim(), x.len()));
        }
        Ok(())
    }
}

/// `‖x − x̂‖²` and its gradient `2(x̂ − x)` w.r.t. `x̂`.
pub fn recon_loss_item(x: &[f64], x_hat: &[f64]) -> Result<(f64, Vec<f64>)> {
    if x.len() != x_hat.len() {
        return Err(Error::shape("recon_loss", x.len(), x_hat.len()));
    }
    let mut loss = 0.0;
    let grad = x
        .iter()
        .zip(x_hat)
        .map(|(a, b)| {
            let d = b - a;
            loss += d * d;
            2.0 * d
        })
        .collect();
    Ok((loss, grad))
}

/// Summed squared reconstruction error over a batch, with per-item gradients.
pub fn recon_loss(xs: &[Vec<f64>], x_hats: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)> {
    if xs.len() != x_hats.len() {
        return Err(Error::shape("recon_loss batch", xs.len(), x_hats.len()));
    }
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(xs.len());
    for (x, xh) in xs.iter().zip(x_hats) {
        let (l, g) = recon_loss_item(x, xh)?;
        total += l;
        grads.push(g);
    }
    Ok((total, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{LinearLayer, Matrix};

    #[test]
    fn zero_params_encode_to_zero() {
        let mut ae = Autoencoder::new(6, &[5], 3, &mut Rng::new(0)).unwrap();
        for l in ae.encoder.layers.iter_mut().chain(ae.decoder.layers.iter_mut()) {
            *l = LinearLayer::zeros(l.in_dim(), l.out_dim());
        }
        assert_eq!(ae.encode(&[1.0, -2.0, 3.0, 0.5, 9.0, 1.0]).unwrap(), vec![0.0; 3]);
        assert_eq!(ae.decode(&[4.0, 1.0, -1.0]).unwrap(), vec![0.0; 6]);
    }

    #[test]
    fn identity_truncation_keeps_leading_coordinates() {
        let mut w = Matrix::zeros(2, 4);
        w.set(0, 0, 1.0);
        w.set(1, 1, 1.0);
        let enc = Mlp {
            layers: vec![LinearLayer::from_parts(w.clone(), vec![0.0; 2]).unwrap()],
        };
        let mut wt = Matrix::zeros(4, 2);
        wt.set(0, 0, 1.0);
        wt.set(1, 1, 1.0);
        let dec = Mlp {
            layers: vec![LinearLayer::from_parts(wt, vec![0.0; 4]).unwrap()],
        };
        let ae = Autoencoder::from_parts(enc, dec).unwrap();
        assert_eq!(ae.encode(&[3.0, -4.0, 5.0, 6.0]).unwrap(), vec![3.0, -4.0]);
        assert_eq!(ae.decode(&[3.0, -4.0]).unwrap(), vec![3.0, -4.0, 0.0, 0.0]);
    }

    #[test]
    fn shape_errors() {
        let ae = Autoencoder::new(4, &[3], 2, &mut Rng::new(0)).unwrap();
        assert!(ae.encode(&[1.0; 5]).is_err());
        assert!(ae.decode(&[1.0; 3]).is_err());
        assert!(recon_loss_item(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn recon_loss_hand_values() {
        let (l, g) = recon_loss_item(&[1.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(l, 1.0);
        assert_eq!(g, vec![-2.0, 0.0]);
        let (l, g) = recon_loss_item(&[0.3, 0.7], &[0.3, 0.7]).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g, vec![0.0, 0.0]);
    }
}
